"""Training loop, evaluation and layer-wise feature extraction."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from maskunit.features import FeatureSequence, Waveform
from maskunit.masking import MaskConfig, mask_seed, sample_mask
from maskunit.model.checkpoint import save_checkpoint
from maskunit.model.config import TrainConfig
from maskunit.model.network import MaskedPredictionNet, conv_output_length, receptive_field
from maskunit.model.objective import masked_prediction_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class Utterance:
    """Model input (feature matrix or waveform samples) with one target array per head."""

    inputs: np.ndarray
    targets: list
    utterance_id: str = ""

    @property
    def num_frames(self):
        return len(self.targets[0]) if self.targets else None


@dataclass
class TrainResult:
    model: MaskedPredictionNet
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    masked_acc: list = field(default_factory=list)
    step: int = 0


def lr_at(step, total_steps, peak, warmup_frac=0.08):
    """Linear ramp from 0 to ``peak`` over the warmup steps, then linear decay to 0."""
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    return peak * max(0.0, (total_steps - step) / (total_steps - warmup))


@contextlib.contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _raw(x):
    if isinstance(x, (FeatureSequence, Waveform)):
        x = x.data if isinstance(x, FeatureSequence) else x.samples
    return np.array(x)


def _check_lengths(model, utt):
    T = utt.num_frames
    if model.cfg.input_mode == "waveform":
        n = conv_output_length(len(utt.inputs), model.cfg.conv)
    else:
        n = len(utt.inputs)
    if n != T:
        raise ValueError(f"utterance {utt.utterance_id}: model yields {n} frames, targets have {T}")
    for k, z in enumerate(utt.targets):
        if len(z) != T:
            raise ValueError(f"utterance {utt.utterance_id}: head {k} targets have {len(z)} frames, expected {T}")


def crop(model, utt, start, length):
    """Slice ``length`` frames starting at ``start`` from inputs and targets."""
    if model.cfg.input_mode == "waveform":
        span, hop = receptive_field(model.cfg.conv)
        x = utt.inputs[start * hop:start * hop + span + (length - 1) * hop]
    else:
        x = utt.inputs[start:start + length]
    return x, [np.asarray(z[start:start + length]) for z in utt.targets]


def make_batch(model, data, step, cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, step])
    n = min(cfg.batch_size, len(data))
    idx = rng.choice(len(data), size=n, replace=False)
    length = min(cfg.max_frames, min(data[i].num_frames for i in idx))
    mcfg = MaskConfig(cfg.mask_prob, cfg.mask_length)
    xs, zs, ms = [], [], []
    for i in idx:
        utt = data[i]
        start = int(rng.integers(0, utt.num_frames - length + 1))
        x, z = crop(model, utt, start, length)
        xs.append(x)
        zs.append(z)
        ms.append(sample_mask(length, mcfg, mask_seed(cfg.seed, utt.utterance_id, step)).bool_mask)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.stack(xs), dtype=dtype)
    targets = [torch.as_tensor(np.stack([z[k] for z in zs]), dtype=torch.long)
               for k in range(len(zs[0]))]
    return x, targets, torch.as_tensor(np.stack(ms))


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=0.0, betas=tuple(cfg.betas), eps=cfg.adam_eps)


def check_gradients(model):
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")


def prepare_dataset(model, dataset):
    data = [u if isinstance(u, Utterance) else Utterance(_raw(u[0]), [np.asarray(z) for z in u[1]],
                                                         u[2] if len(u) > 2 else f"utt{i}")
            for i, u in enumerate(dataset)]
    if not data:
        raise ValueError("empty training set")
    for u in data:
        u.inputs = _raw(u.inputs)
        if len(u.targets) != len(model.cfg.codebook_sizes):
            raise ValueError(f"utterance {u.utterance_id}: {len(u.targets)} target streams for "
                             f"{len(model.cfg.codebook_sizes)} heads")
        _check_lengths(model, u)
    return data


def _abort(model, cfg, good, step, exc):
    if cfg.checkpoint_path and good is not None:
        good_step, state = good
        model.load_state_dict(state)
        model.eval()
        save_checkpoint(cfg.checkpoint_path, model, good_step)
    raise TrainingDiverged(f"step {step}: {exc}") from exc


def train(model: MaskedPredictionNet, dataset, cfg: TrainConfig = TrainConfig(), callback=None) -> TrainResult:
    """Adam with linear warmup/decay; masks are resampled every step.

    Per-step loss is the weighted NLL divided by the weighted frame count.
    A non-finite loss, gradient or parameter aborts after saving the last
    parameters that produced a finite loss (when ``cfg.checkpoint_path``
    is set).
    """
    data = prepare_dataset(model, dataset)
    result = TrainResult(model)
    opt = make_optimizer(model.parameters(), cfg)
    layerdrop_gen = torch.Generator().manual_seed(cfg.seed)
    n_heads = len(model.cfg.codebook_sizes)
    good = None
    with single_thread():
        model.train()
        for step in range(cfg.steps):
            lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_frac)
            for group in opt.param_groups:
                group["lr"] = lr
            x, targets, mask = make_batch(model, data, step, cfg)
            opt.zero_grad(set_to_none=True)
            try:
                logits, _ = model(x, mask, layerdrop_gen)
                out = masked_prediction_loss(logits, targets, mask, cfg.alpha)
                weight = n_heads * (cfg.alpha * out.n_masked + (1 - cfg.alpha) * out.n_unmasked)
                loss = out.loss / max(weight, 1.0)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                loss.backward()
                check_gradients(model)
            except FloatingPointError as exc:
                _abort(model, cfg, good, step, exc)
            # parameters at this point produced a finite loss
            good = (step, {k: v.detach().clone() for k, v in model.state_dict().items()})
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
            if bad:
                _abort(model, cfg, good, step, FloatingPointError(f"non-finite parameter {bad[0]}"))
            result.step = step + 1
            result.losses.append(float(loss.detach()))
            result.lrs.append(lr)
            result.masked_acc.append(out.accuracy(0)[0])
            if callback is not None:
                callback(step, result)
            if cfg.checkpoint_every and cfg.checkpoint_path and result.step % cfg.checkpoint_every == 0:
                save_checkpoint(cfg.checkpoint_path, model, result.step)
            if step % 200 == 0:
                log.info("step %d lr %.2e loss %.4f", step, lr, result.losses[-1])
    model.eval()
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model, result.step)
    return result


@torch.no_grad()
def evaluate(model, dataset, mask_cfg: MaskConfig = MaskConfig(), seed=0):
    """Masked/unmasked argmax accuracy per head on full-length utterances."""
    data = prepare_dataset(model, dataset)
    model.eval()
    n_heads = len(model.cfg.codebook_sizes)
    mc, uc = np.zeros(n_heads), np.zeros(n_heads)
    nm = nu = 0
    dtype = next(model.parameters()).dtype
    with single_thread():
        for u in data:
            T = u.num_frames
            mask = torch.as_tensor(sample_mask(T, mask_cfg, mask_seed(seed, u.utterance_id)).bool_mask)[None]
            x = torch.as_tensor(u.inputs, dtype=dtype)[None]
            logits, _ = model(x, mask)
            targets = [torch.as_tensor(z, dtype=torch.long)[None] for z in u.targets]
            out = masked_prediction_loss(logits, targets, mask, 1.0)
            mc += out.masked_correct
            uc += out.unmasked_correct
            nm += out.n_masked
            nu += out.n_unmasked
    return {
        "masked_acc": (mc / nm).tolist() if nm else [float("nan")] * n_heads,
        "unmasked_acc": (uc / nu).tolist() if nu else [float("nan")] * n_heads,
        "n_masked": nm,
        "n_unmasked": nu,
    }


@torch.no_grad()
def extract_features(model, inputs, layer_index, utterance_ids=None):
    """Unmasked eval-mode hidden states of one layer, one FeatureSequence per input."""
    if not 0 <= layer_index <= model.num_layers:
        raise ValueError(f"layer {layer_index} out of range 0..{model.num_layers}")
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with single_thread():
        for i, x in enumerate(inputs):
            utt = getattr(x, "utterance_id", None) or (utterance_ids[i] if utterance_ids else f"utt{i}")
            states = model.encode(torch.as_tensor(_raw(x), dtype=dtype)[None])
            h = states[layer_index][0].numpy().astype(np.float32)
            out.append(FeatureSequence(h, 50, f"encoder-layer-{layer_index}", utt))
    return out
