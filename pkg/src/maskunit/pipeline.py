"""Iterative refinement: cluster -> label -> train -> extract -> re-cluster.

Each iteration ``N`` lives in ``<work_dir>/it<N>/``::

    codebook/         ensemble directory (index.json + one .mucb per codebook)
    labels0.txt ...   one label file per codebook
    checkpoint.muck
    metrics.json      only when ground-truth phone labels exist
    stages.json       config hash per stage, used to skip up-to-date stages

Also home to the ablation harnesses (k-means stability, layer sweep, loss
weight and mask probability sweeps, cluster ensembles).
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from maskunit.clustering import (
    ClusterEnsemble,
    Codebook,
    KMeansTeacher,
    ProductQuantizer,
    assign,
    subsample_frames,
)
from maskunit.features import FeatureSequence, splice
from maskunit.io import iter_feature_dir, read_labels, write_labels
from maskunit.masking import MaskConfig
from maskunit.metrics import build_contingency
from maskunit.model import (
    MaskedPredictionNet,
    ModelConfig,
    TrainConfig,
    Utterance,
    evaluate,
    extract_features,
    load_checkpoint,
    masked_prediction_loss,
    train,
)
from maskunit.model.training import make_batch, prepare_dataset
from maskunit.synthetic import SyntheticCorpusSpec, corrupt_labels, gen_synthetic_corpus

log = logging.getLogger(__name__)

STAGES = ("cluster", "label", "train", "metrics", "heldout", "trial")

DEFAULT_CLUSTERING = {
    "algorithm": "minibatch",
    "batch_size": 10000,
    "n_starts": 20,
    "max_batches": 100,
    "subsample": 1.0,
}


def stage_seed(root_seed, iteration, stage, extra=0):
    """Deterministic 32-bit seed for one (iteration, stage, extra) triple."""
    ss = np.random.SeedSequence([int(root_seed), int(iteration), STAGES.index(stage), int(extra)])
    return int(ss.generate_state(1)[0])


@dataclass
class IterationConfig:
    """One refinement round.

    ``source`` is ``"features"`` for the acoustic input features, or
    ``"checkpoint"`` to cluster layer ``layer`` of the previous iteration's
    model. ``k`` may be a list for a multi-codebook ensemble; ``pq_subspaces``
    switches to product quantization with ``k`` clusters per subspace.
    """

    source: str = "features"
    layer: int | None = None
    k: int | list = 50
    pq_subspaces: int | None = None
    splice: int | None = None
    clustering: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval_layer: int | None = None

    @property
    def ks(self):
        return list(self.k) if isinstance(self.k, (list, tuple)) else [int(self.k)]


@dataclass
class PipelineConfig:
    work_dir: str = "work"
    seed: int = 0
    corpus: dict | None = None
    data: dict | None = None
    heldout_fraction: float = 0.2
    model: dict = field(default_factory=dict)
    iterations: list = field(default_factory=lambda: [IterationConfig()])

    def __post_init__(self):
        self.iterations = [it if isinstance(it, IterationConfig) else IterationConfig(**it)
                           for it in self.iterations]
        if not self.iterations:
            raise ValueError("pipeline needs at least one iteration")
        if self.iterations[0].source != "features":
            raise ValueError("the first iteration must cluster the acoustic features")
        for it in self.iterations[1:]:
            if it.source not in ("features", "checkpoint"):
                raise ValueError(f"unknown feature source {it.source!r}")
        if (self.corpus is None) == (self.data is None):
            raise ValueError("give exactly one of 'corpus' (synthetic) or 'data' (feature directory)")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        cfg = cls(**raw)
        if not Path(cfg.work_dir).is_absolute():
            cfg.work_dir = str(Path(path).resolve().parent / cfg.work_dir)
        return cfg

    def to_dict(self):
        return asdict(self)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Corpus:
    """Input features, optional ground-truth phones, and the held-out split."""

    def __init__(self, features, phones, heldout_fraction, seed):
        self.features = list(features)
        self.ids = [f.utterance_id for f in self.features]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate utterance ids in corpus")
        self.phones = phones
        rng = np.random.default_rng(stage_seed(seed, 0, "heldout"))
        held = rng.random(len(self.features)) < heldout_fraction
        if len(self.features) > 1 and held.all():
            held[0] = False
        self.heldout = held

    @classmethod
    def from_config(cls, cfg: PipelineConfig):
        if cfg.corpus is not None:
            spec = SyntheticCorpusSpec(**cfg.corpus)
            corpus = gen_synthetic_corpus(spec)
            out = Path(cfg.work_dir) / "corpus"
            stamp = out / "spec.json"
            h = _hash(asdict(spec))
            if not stamp.exists() or json.loads(stamp.read_text()).get("hash") != h:
                corpus.save(out)
                stamp.write_text(json.dumps({"hash": h, "spec": asdict(spec)}, sort_keys=True) + "\n")
            return cls(corpus.features, corpus.phones, cfg.heldout_fraction, cfg.seed)
        feats = list(iter_feature_dir(cfg.data["features"]))
        phones = read_labels(cfg.data["phones"]) if cfg.data.get("phones") else None
        return cls(feats, phones, cfg.heldout_fraction, cfg.seed)

    def split(self, items, heldout):
        return [x for x, h in zip(items, self.heldout) if h == heldout]

    @property
    def train_ids(self):
        return self.split(self.ids, False)

    @property
    def heldout_ids(self):
        return self.split(self.ids, True)


def _feature_arrays(features):
    return [np.asarray(f.data if isinstance(f, FeatureSequence) else f) for f in features]


def fit_teacher(features, ks, params, seed, pq_subspaces=None, feature_kind="mfcc"):
    """Fit the codebooks of one teacher on (a random utterance subset of) ``features``."""
    p = {**DEFAULT_CLUSTERING, **(params or {})}
    chunks = list(subsample_frames(_feature_arrays(features), p["subsample"], seed))
    if not chunks:
        raise ValueError(f"subsample fraction {p['subsample']} selected no utterances")
    X = np.concatenate(chunks)
    common = dict(algorithm=p["algorithm"], batch_size=p["batch_size"], n_starts=p["n_starts"],
                  max_batches=p["max_batches"], random_state=seed)
    if pq_subspaces:
        if len(ks) != 1:
            raise ValueError("product quantization takes a single per-subspace K")
        pq = ProductQuantizer(ks[0], n_subspaces=pq_subspaces, **common).fit(X)
        cbs = [Codebook(cb.centroids, feature_kind, cb.dims, inertia=cb.inertia)
               for cb in pq.ensemble_.codebooks]
        return ClusterEnsemble(tuple(cbs), product=True)
    cbs = []
    for k in ks:
        km = KMeansTeacher(k, refit_per_start=p.get("refit_per_start", False), **common).fit(X)
        cbs.append(Codebook(km.cluster_centers_, feature_kind, inertia=km.inertia_))
    return ClusterEnsemble(tuple(cbs))


def label_all(ensemble, features):
    """Per-codebook label dicts ``[{utt: labels}, ...]``."""
    out = [dict() for _ in ensemble.codebooks]
    for f in features:
        for k, cb in enumerate(ensemble.codebooks):
            out[k][f.utterance_id] = assign(cb, f).labels
    return out


def pnmi_report(phones, labels, ids):
    table = build_contingency((u, phones[u], labels[u]) for u in ids)
    return table.report()


def _train_config(it: IterationConfig, seed, checkpoint_path=None):
    kw = dict(it.train)
    kw.setdefault("seed", seed)
    return TrainConfig(**kw, checkpoint_path=checkpoint_path)


def _model_config(cfg: PipelineConfig, input_dim, sizes):
    kw = dict(cfg.model)
    kw.update(input_dim=input_dim, codebook_sizes=tuple(sizes))
    return ModelConfig(**kw)


@dataclass
class IterationResult:
    index: int
    ensemble: ClusterEnsemble
    labels: list
    checkpoint: Path
    metrics: dict | None


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self._corpus = None

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self.work.mkdir(parents=True, exist_ok=True)
            self._corpus = Corpus.from_config(self.cfg)
        return self._corpus

    def it_dir(self, n) -> Path:
        return self.work / f"it{n}"

    def _stages(self, n):
        path = self.it_dir(n) / "stages.json"
        return json.loads(path.read_text()) if path.exists() else {}

    def _mark(self, n, stage, h):
        stages = self._stages(n)
        stages[stage] = h
        (self.it_dir(n) / "stages.json").write_text(json.dumps(stages, indent=1, sort_keys=True) + "\n")

    def _fresh(self, n, stage, h, *paths):
        return self._stages(n).get(stage) == h and all(Path(p).exists() for p in paths)

    def iteration_features(self, n):
        """Features clustered in iteration ``n`` (1-based)."""
        it = self.cfg.iterations[n - 1]
        if it.source == "features":
            feats = self.corpus.features
            if it.splice:
                feats = [splice(f, it.splice) for f in feats]
            return feats
        ckpt = self.it_dir(n - 1) / "checkpoint.muck"
        if not ckpt.exists():
            raise FileNotFoundError(f"iteration {n} needs the previous checkpoint {ckpt}")
        model, _ = load_checkpoint(ckpt)
        layer = model.num_layers // 2 if it.layer is None else it.layer
        return extract_features(model, self.corpus.features, layer)

    def _upstream_hash(self, n):
        if n == 1:
            return _hash({"corpus": self.cfg.corpus, "data": self.cfg.data})
        return self._stages(n - 1).get("train", "missing")

    def run_iteration(self, n) -> IterationResult:
        cfg, it = self.cfg, self.cfg.iterations[n - 1]
        d = self.it_dir(n)
        d.mkdir(parents=True, exist_ok=True)
        corpus = self.corpus
        feats = None

        h_cluster = _hash({"up": self._upstream_hash(n), "it": asdict(it), "seed": cfg.seed,
                           "heldout": cfg.heldout_fraction})
        cb_dir = d / "codebook"
        if self._fresh(n, "cluster", h_cluster, cb_dir / "index.json"):
            ensemble = ClusterEnsemble.load(cb_dir)
        else:
            feats = self.iteration_features(n)
            ensemble = fit_teacher(corpus.split(feats, False), it.ks, it.clustering,
                                   stage_seed(cfg.seed, n, "cluster"), it.pq_subspaces,
                                   feats[0].feature_kind)
            ensemble.save(cb_dir)
            self._mark(n, "cluster", h_cluster)

        label_paths = [d / f"labels{k}.txt" for k in range(len(ensemble.codebooks))]
        h_label = _hash({"cluster": h_cluster})
        if self._fresh(n, "label", h_label, *label_paths):
            labels = [read_labels(p) for p in label_paths]
        else:
            feats = feats or self.iteration_features(n)
            labels = label_all(ensemble, feats)
            for p, lab in zip(label_paths, labels):
                write_labels(p, lab)
            self._mark(n, "label", h_label)

        ckpt = d / "checkpoint.muck"
        tcfg = _train_config(it, stage_seed(cfg.seed, n, "train"), str(ckpt))
        # the checkpoint path is excluded so hashes do not depend on the work directory
        h_train = _hash({"label": h_label, "train": asdict(replace(tcfg, checkpoint_path=None)),
                         "model": cfg.model})
        if not self._fresh(n, "train", h_train, ckpt):
            input_dim = corpus.features[0].D
            mcfg = _model_config(cfg, input_dim, ensemble.sizes)
            model = MaskedPredictionNet(mcfg, seed=tcfg.seed)
            data = [Utterance(np.asarray(f.data), [lab[f.utterance_id] for lab in labels], f.utterance_id)
                    for f in corpus.split(corpus.features, False)]
            result = train(model, data, tcfg)
            log.info("iteration %d: trained %d steps, final loss %s", n, result.step,
                     result.losses[-1] if result.losses else None)
            self._mark(n, "train", h_train)

        metrics = None
        mpath = d / "metrics.json"
        if corpus.phones is not None:
            h_metrics = _hash({"train": h_train})
            if self._fresh(n, "metrics", h_metrics, mpath):
                metrics = json.loads(mpath.read_text())
            else:
                metrics = self.iteration_metrics(n, ensemble, labels, ckpt)
                mpath.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
                self._mark(n, "metrics", h_metrics)
        elif mpath.exists():
            mpath.unlink()
        return IterationResult(n, ensemble, labels, ckpt, metrics)

    def iteration_metrics(self, n, ensemble, labels, ckpt):
        """Teacher quality of this iteration's labels and of a re-clustered student layer."""
        cfg, it, corpus = self.cfg, self.cfg.iterations[n - 1], self.corpus
        held = corpus.heldout_ids
        teacher = [pnmi_report(corpus.phones, lab, held) for lab in labels]
        model, _ = load_checkpoint(ckpt)
        layer = model.num_layers // 2 if it.eval_layer is None else it.eval_layer
        student_feats = extract_features(model, corpus.features, layer)
        student_ens = fit_teacher(corpus.split(student_feats, False), [ensemble.sizes[0]],
                                  {k: v for k, v in it.clustering.items()},
                                  stage_seed(cfg.seed, n, "metrics"), None, student_feats[0].feature_kind)
        student_labels = label_all(student_ens, student_feats)[0]
        student = pnmi_report(corpus.phones, student_labels, held)
        data = [Utterance(np.asarray(f.data), [lab[f.utterance_id] for lab in labels], f.utterance_id)
                for f in corpus.split(corpus.features, True)]
        tc = _train_config(it, 0)
        acc = evaluate(model, data, MaskConfig(tc.mask_prob, tc.mask_length), seed=cfg.seed)
        return {"iteration": n, "teacher": teacher, "student_layer": layer, "student": student,
                "heldout_masked_acc": acc["masked_acc"], "heldout_unmasked_acc": acc["unmasked_acc"]}

    def run(self):
        return [self.run_iteration(n) for n in range(1, len(self.cfg.iterations) + 1)]


def run_pipeline(cfg: PipelineConfig):
    return Pipeline(cfg).run()


# ---------------------------------------------------------------- ablations


def stability_study(train_features, heldout_features, phones, ks, sizes, trials=10, seed=0,
                    clustering=None):
    """PNMI mean/std on held-out frames over repeated k-means fits.

    ``sizes`` are fractions of the training utterances used for fitting.
    Returns a dict with ``mean`` and ``std`` arrays of shape ``(len(ks), len(sizes))``.
    """
    mean = np.zeros((len(ks), len(sizes)))
    std = np.zeros_like(mean)
    held_ids = [f.utterance_id for f in heldout_features]
    for a, k in enumerate(ks):
        for b, size in enumerate(sizes):
            scores = []
            for trial in range(trials):
                s = stage_seed(seed, a * len(sizes) + b, "trial", trial)
                params = {**(clustering or {}), "subsample": size}
                ens = fit_teacher(train_features, [k], params, s)
                lab = label_all(ens, heldout_features)[0]
                scores.append(pnmi_report(phones, lab, held_ids)["pnmi"])
            mean[a, b] = np.mean(scores)
            std[a, b] = np.std(scores)
    return {"ks": list(ks), "sizes": list(sizes), "trials": trials, "mean": mean, "std": std}


def layer_sweep(model, train_features, heldout_features, phones, ks, seed=0, clustering=None):
    """Cluster every layer ``0..N`` for every K; one row per (layer, K)."""
    held_ids = [f.utterance_id for f in heldout_features]
    rows = []
    for layer in range(model.num_layers + 1):
        tr = extract_features(model, train_features, layer)
        he = extract_features(model, heldout_features, layer)
        for k in ks:
            ens = fit_teacher(tr, [k], clustering, seed)
            rep = pnmi_report(phones, label_all(ens, he)[0], held_ids)
            rows.append({"layer": layer, "k": k, "cluster_purity": rep["cluster_purity"],
                         "phone_purity": rep["phone_purity"], "pnmi": rep["pnmi"]})
    return rows


def _train_and_score(train_data, heldout_data, phones, model_cfg, tcfg, eval_layer, k, clustering):
    model = MaskedPredictionNet(model_cfg, seed=tcfg.seed)
    train(model, train_data, tcfg)
    acc = evaluate(model, heldout_data, MaskConfig(tcfg.mask_prob, tcfg.mask_length), seed=tcfg.seed)
    row = {"masked_acc": acc["masked_acc"][0], "unmasked_acc": acc["unmasked_acc"][0]}
    if phones is not None:
        layer = model.num_layers // 2 if eval_layer is None else eval_layer
        tr = extract_features(model, [u.inputs for u in train_data], layer,
                              [u.utterance_id for u in train_data])
        he = extract_features(model, [u.inputs for u in heldout_data], layer,
                              [u.utterance_id for u in heldout_data])
        ens = fit_teacher(tr, [k], clustering, tcfg.seed)
        row["pnmi"] = pnmi_report(phones, label_all(ens, he)[0], [u.utterance_id for u in heldout_data])["pnmi"]
    return row


def alpha_sweep(train_data, heldout_data, model_cfg, tcfg, alphas=(1.0, 0.5, 0.0), phones=None,
                eval_layer=None, k=None, clustering=None):
    """One model per loss weight, shared seed; held-out accuracy and layer PNMI."""
    k = k or model_cfg.codebook_sizes[0]
    return [{"alpha": a, **_train_and_score(train_data, heldout_data, phones, model_cfg,
                                            replace(tcfg, alpha=a), eval_layer, k, clustering)}
            for a in alphas]


def mask_prob_sweep(train_data, heldout_data, model_cfg, tcfg, probs=(0.05, 0.08, 0.1), phones=None,
                    eval_layer=None, k=None, clustering=None):
    k = k or model_cfg.codebook_sizes[0]
    return [{"mask_prob": p, **_train_and_score(train_data, heldout_data, phones, model_cfg,
                                                replace(tcfg, mask_prob=p), eval_layer, k, clustering)}
            for p in probs]


def ensemble_run(train_data, heldout_data, model_cfg, tcfg):
    """Multi-head training over several codebooks.

    Reports the initial masked-frame loss against ``sum_k ln C_k`` and the
    held-out masked accuracy of every head.
    """
    model = MaskedPredictionNet(model_cfg, seed=tcfg.seed)
    init = initial_masked_loss(model, train_data, tcfg)
    train(model, train_data, tcfg)
    acc = evaluate(model, heldout_data, MaskConfig(tcfg.mask_prob, tcfg.mask_length), seed=tcfg.seed)
    return {"heads": len(model_cfg.codebook_sizes), "sizes": list(model_cfg.codebook_sizes),
            "init_loss_per_masked_frame": init,
            "uniform_loss_per_masked_frame": float(sum(np.log(model_cfg.codebook_sizes))),
            "masked_acc": acc["masked_acc"], "model": model}


def initial_masked_loss(model, data, tcfg):
    """Masked NLL per masked frame (summed over heads) of the untrained model on one batch."""
    prepared = prepare_dataset(model, data)
    with torch.no_grad():
        model.eval()
        x, targets, mask = make_batch(model, prepared, 0, tcfg)
        logits, _ = model(x, mask)
        out = masked_prediction_loss(logits, targets, mask, 1.0)
    return float(out.masked_nll) / max(out.n_masked, 1)


def corpus_datasets(corpus: Corpus, labels):
    """Train/held-out :class:`Utterance` lists with targets from per-head label dicts."""
    def make(feats):
        return [Utterance(np.asarray(f.data), [lab[f.utterance_id] for lab in labels], f.utterance_id)
                for f in feats]
    return make(corpus.split(corpus.features, False)), make(corpus.split(corpus.features, True))


def noisy_teacher(corpus: Corpus, fraction, seed=0):
    """Ground-truth phones with ``fraction`` of frames relabelled uniformly at random."""
    n = int(max(z.max() for z in corpus.phones.values())) + 1
    return corrupt_labels(corpus.phones, fraction, n, seed), n


def summarize(results):
    """JSON-safe copy of a harness result (arrays become lists, models dropped)."""
    def clean(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items() if k != "model"}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        return v
    return clean(copy.copy(results))
