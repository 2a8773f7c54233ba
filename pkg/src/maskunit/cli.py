"""Command-line entry point: ``maskunit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from maskunit.clustering import assign, load_codebooks
from maskunit.features import MfccConfig, compute_mfcc, load_wav, splice
from maskunit.io import (
    iter_feature_dir,
    manifest_paths,
    read_features,
    read_labels,
    write_feature_dir,
    write_labels,
)
from maskunit.metrics import label_metrics
from maskunit.model import (
    MaskedPredictionNet,
    ModelConfig,
    TrainConfig,
    Utterance,
    extract_features,
    load_checkpoint,
    train,
)
from maskunit import pipeline as pl

log = logging.getLogger("maskunit")


def _load_inputs(manifest):
    """Model inputs listed in a manifest: feature files, or WAV files for waveform models."""
    out = []
    for p in manifest_paths(manifest):
        if p.suffix == ".wav":
            out.append(load_wav(p))
        else:
            out.append(read_features(p))
    return out


def _read_config(path):
    if path is None:
        return {}
    return yaml.safe_load(Path(path).read_text()) or {}


def cmd_features_mfcc(args):
    cfg = MfccConfig()
    feats = []
    for p in manifest_paths(args.manifest):
        f = compute_mfcc(load_wav(p), cfg)
        if args.splice:
            f = splice(f, args.splice)
        feats.append(f)
    write_feature_dir(args.out_dir, feats)
    log.info("wrote %d feature files to %s", len(feats), args.out_dir)


def cmd_cluster_fit(args):
    feats = list(iter_feature_dir(args.features))
    params = {"batch_size": args.batch_size, "n_starts": args.starts, "subsample": args.subsample,
              "max_batches": args.max_batches, "algorithm": args.algorithm}
    ens = pl.fit_teacher(feats, args.k, params, args.seed, args.pq, feats[0].feature_kind)
    out = Path(args.out)
    if len(ens.codebooks) == 1 and not args.pq:
        ens.codebooks[0].save(out)
    else:
        ens.save(out)


def cmd_cluster_assign(args):
    cbs = load_codebooks(args.codebook)
    feats = list(iter_feature_dir(args.features))
    out = Path(args.out)
    if len(cbs) == 1:
        write_labels(out, {f.utterance_id: assign(cbs[0], f).labels for f in feats})
        return
    out.mkdir(parents=True, exist_ok=True)
    for k, cb in enumerate(cbs):
        write_labels(out / f"labels{k}.txt", {f.utterance_id: assign(cb, f).labels for f in feats})


def cmd_train(args):
    conf = _read_config(args.config)
    inputs = _load_inputs(args.manifest)
    label_sets = [read_labels(p) for p in args.labels]
    sizes = conf.get("model", {}).get("codebook_sizes") or [
        int(max(z.max() for z in lab.values())) + 1 for lab in label_sets]
    model_kw = dict(conf.get("model", {}))
    model_kw["codebook_sizes"] = tuple(sizes)
    first = inputs[0]
    if hasattr(first, "samples"):
        model_kw["input_mode"] = "waveform"
    else:
        model_kw.setdefault("input_dim", first.D)
    mcfg = ModelConfig(**model_kw)
    train_kw = dict(conf.get("train", {}))
    train_kw.update(alpha=args.alpha, seed=args.seed, checkpoint_path=str(args.out))
    if args.steps is not None:
        train_kw["steps"] = args.steps
    tcfg = TrainConfig(**train_kw)
    data = []
    for x in inputs:
        utt = x.utterance_id
        missing = [i for i, lab in enumerate(label_sets) if utt not in lab]
        if missing:
            raise SystemExit(f"no labels for utterance {utt} in {args.labels[missing[0]]}")
        raw = x.samples if hasattr(x, "samples") else x.data
        data.append(Utterance(np.asarray(raw), [lab[utt] for lab in label_sets], utt))
    model = MaskedPredictionNet(mcfg, seed=args.seed)
    result = train(model, data, tcfg)
    if args.loss_curve:
        Path(args.loss_curve).write_text("\n".join(repr(v) for v in result.losses) + "\n")


def cmd_extract(args):
    model, _ = load_checkpoint(args.checkpoint)
    feats = extract_features(model, _load_inputs(args.manifest), args.layer)
    write_feature_dir(args.out, feats)


def _label_files(path):
    path = Path(path)
    if path.is_dir():
        merged = {}
        for p in sorted(path.glob("*.txt")):
            merged.update(read_labels(p))
        return merged
    return read_labels(path)


def cmd_metrics(args):
    report = label_metrics(_label_files(args.phones), _label_files(args.units))
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)


def _write_report(obj, path):
    text = json.dumps(pl.summarize(obj), indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pipeline_run(args):
    results = pl.run_pipeline(pl.PipelineConfig.load(args.config))
    summary = [{"iteration": r.index, "sizes": r.ensemble.sizes, "checkpoint": str(r.checkpoint),
                "metrics": r.metrics} for r in results]
    _write_report(summary, args.report)


def cmd_pipeline_synth(args):
    from maskunit.synthetic import SyntheticCorpusSpec, gen_synthetic_corpus

    conf = _read_config(args.config).get("corpus", {}) if args.config else {}
    if args.sigma is not None:
        conf["noise_sigma"] = args.sigma
    if args.seed is not None:
        conf["seed"] = args.seed
    gen_synthetic_corpus(SyntheticCorpusSpec(**conf)).save(args.out)


def cmd_pipeline_stability(args):
    cfg = pl.PipelineConfig.load(args.config)
    corpus = pl.Pipeline(cfg).corpus
    if corpus.phones is None:
        raise SystemExit("stability study needs ground-truth phone labels")
    res = pl.stability_study(corpus.split(corpus.features, False), corpus.split(corpus.features, True),
                             corpus.phones, args.ks, args.sizes, args.trials, cfg.seed,
                             cfg.iterations[0].clustering)
    _write_report(res, args.report)


def cmd_pipeline_layer_sweep(args):
    cfg = pl.PipelineConfig.load(args.config)
    corpus = pl.Pipeline(cfg).corpus
    if corpus.phones is None:
        raise SystemExit("layer sweep needs ground-truth phone labels")
    model, _ = load_checkpoint(args.checkpoint)
    rows = pl.layer_sweep(model, corpus.split(corpus.features, False), corpus.split(corpus.features, True),
                          corpus.phones, args.ks, cfg.seed, cfg.iterations[0].clustering)
    _write_report(rows, args.report)


def _sweep_setup(args):
    cfg = pl.PipelineConfig.load(args.config)
    corpus = pl.Pipeline(cfg).corpus
    it = cfg.iterations[0]
    if args.corrupt is not None:
        if corpus.phones is None:
            raise SystemExit("a corrupted teacher needs ground-truth phone labels")
        labels, n = pl.noisy_teacher(corpus, args.corrupt, cfg.seed)
    else:
        ens = pl.fit_teacher(corpus.split(corpus.features, False), it.ks[:1], it.clustering,
                             pl.stage_seed(cfg.seed, 1, "cluster"))
        labels, n = pl.label_all(ens, corpus.features)[0], it.ks[0]
    tr, he = pl.corpus_datasets(corpus, [labels])
    mcfg = pl._model_config(cfg, corpus.features[0].D, [n])
    tcfg = pl._train_config(it, pl.stage_seed(cfg.seed, 1, "train"))
    return cfg, corpus, tr, he, mcfg, tcfg, n


def cmd_pipeline_alpha_sweep(args):
    cfg, corpus, tr, he, mcfg, tcfg, n = _sweep_setup(args)
    rows = pl.alpha_sweep(tr, he, mcfg, tcfg, args.alphas, corpus.phones, k=n,
                          clustering=cfg.iterations[0].clustering)
    _write_report(rows, args.report)


def cmd_pipeline_mask_sweep(args):
    cfg, corpus, tr, he, mcfg, tcfg, n = _sweep_setup(args)
    rows = pl.mask_prob_sweep(tr, he, mcfg, tcfg, args.probs, corpus.phones, k=n,
                              clustering=cfg.iterations[0].clustering)
    _write_report(rows, args.report)


def build_parser():
    p = argparse.ArgumentParser(prog="maskunit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    feat = sub.add_parser("features", help="acoustic feature extraction")
    fsub = feat.add_subparsers(dest="subcommand", required=True)
    m = fsub.add_parser("mfcc", help="39-dim MFCC for every WAV in a manifest")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out-dir", required=True)
    m.add_argument("--splice", type=int, default=None)
    m.set_defaults(func=cmd_features_mfcc)

    cl = sub.add_parser("cluster", help="k-means unit discovery")
    csub = cl.add_subparsers(dest="subcommand", required=True)
    f = csub.add_parser("fit")
    f.add_argument("--features", required=True, help="feature directory or manifest")
    f.add_argument("--k", type=int, nargs="+", default=[100])
    f.add_argument("--batch-size", type=int, default=10000)
    f.add_argument("--starts", type=int, default=20)
    f.add_argument("--max-batches", type=int, default=100)
    f.add_argument("--subsample", type=float, default=0.1)
    f.add_argument("--algorithm", choices=["minibatch", "lloyd"], default="minibatch")
    f.add_argument("--pq", type=int, default=None, metavar="N", help="product quantization over N subspaces")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="codebook file (single K) or ensemble directory")
    f.set_defaults(func=cmd_cluster_fit)
    a = csub.add_parser("assign")
    a.add_argument("--codebook", required=True)
    a.add_argument("--features", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_cluster_assign)

    t = sub.add_parser("train", help="masked prediction pre-training")
    t.add_argument("--manifest", required=True)
    t.add_argument("--labels", action="append", required=True)
    t.add_argument("--config", default=None, help="YAML with 'model' and 'train' sections")
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--loss-curve", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="hidden states of one layer")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--layer", type=int, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    mt = sub.add_parser("metrics", help="phone purity, cluster purity and PNMI")
    mt.add_argument("--phones", required=True, help="label file or directory of label files")
    mt.add_argument("--units", required=True, help="label file or directory of label files")
    mt.add_argument("--report", default=None)
    mt.set_defaults(func=cmd_metrics)

    pp = sub.add_parser("pipeline", help="iterative refinement and ablations")
    psub = pp.add_subparsers(dest="subcommand", required=True)
    r = psub.add_parser("run")
    r.add_argument("--config", required=True)
    r.add_argument("--report", default=None)
    r.set_defaults(func=cmd_pipeline_run)
    s = psub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--config", default=None)
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline_synth)
    st = psub.add_parser("stability")
    st.add_argument("--config", required=True)
    st.add_argument("--ks", type=int, nargs="+", default=[20, 50])
    st.add_argument("--sizes", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    st.add_argument("--trials", type=int, default=10)
    st.add_argument("--report", default=None)
    st.set_defaults(func=cmd_pipeline_stability)
    ls = psub.add_parser("layer-sweep")
    ls.add_argument("--config", required=True)
    ls.add_argument("--checkpoint", required=True)
    ls.add_argument("--ks", type=int, nargs="+", default=[50])
    ls.add_argument("--report", default=None)
    ls.set_defaults(func=cmd_pipeline_layer_sweep)
    al = psub.add_parser("alpha-sweep")
    al.add_argument("--config", required=True)
    al.add_argument("--alphas", type=float, nargs="+", default=[1.0, 0.5, 0.0])
    al.add_argument("--corrupt", type=float, default=None, help="relabel this fraction of true phones")
    al.add_argument("--report", default=None)
    al.set_defaults(func=cmd_pipeline_alpha_sweep)
    mp = psub.add_parser("mask-sweep")
    mp.add_argument("--config", required=True)
    mp.add_argument("--probs", type=float, nargs="+", default=[0.05, 0.08, 0.1])
    mp.add_argument("--corrupt", type=float, default=None)
    mp.add_argument("--report", default=None)
    mp.set_defaults(func=cmd_pipeline_mask_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
