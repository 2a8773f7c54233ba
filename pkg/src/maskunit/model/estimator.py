from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from maskunit.masking import MaskConfig
from maskunit.model.config import ModelConfig, TrainConfig, conv_layers
from maskunit.model.network import MaskedPredictionNet
from maskunit.model.training import Utterance, evaluate, extract_features, train


def _targets_per_utterance(y, n):
    """Normalise ``y`` to a list (per utterance) of lists (per head) of label arrays."""
    if y is None or len(y) != n:
        raise ValueError("need one target entry per utterance")
    out = []
    for z in y:
        if isinstance(z, (list, tuple)):
            out.append([np.asarray(h, dtype=np.int64) for h in z])
            continue
        z = np.asarray(z, dtype=np.int64)
        out.append([z] if z.ndim == 1 else [z[:, k] for k in range(z.shape[1])])
    return out


class MaskedUnitPredictor(TransformerMixin, BaseEstimator):
    """Masked prediction of discrete unit targets.

    ``fit(X, y)`` takes a list of per-utterance inputs (``(T, D)`` feature
    matrices, or 1-D waveforms when ``input_mode="waveform"``) and a list of
    unit label sequences: 1-D arrays for a single codebook, ``(T, K)`` arrays
    or per-head lists for an ensemble. ``transform`` returns the hidden
    states of layer ``layer`` for each utterance.
    """

    def __init__(self, num_layers=2, embed_dim=64, ffn_dim=256, num_heads=2, proj_dim=32,
                 tau=0.1, conv_channels=32, input_mode="precomputed-features",
                 codebook_sizes=None, layerdrop_prob=0.0, alpha=1.0, mask_prob=0.08,
                 mask_length=10, steps=2000, batch_size=8, max_frames=200, peak_lr=2e-3,
                 warmup_frac=0.08, layer=None, random_state=0):
        self.num_layers = num_layers
        self.embed_dim = embed_dim
        self.ffn_dim = ffn_dim
        self.num_heads = num_heads
        self.proj_dim = proj_dim
        self.tau = tau
        self.conv_channels = conv_channels
        self.input_mode = input_mode
        self.codebook_sizes = codebook_sizes
        self.layerdrop_prob = layerdrop_prob
        self.alpha = alpha
        self.mask_prob = mask_prob
        self.mask_length = mask_length
        self.steps = steps
        self.batch_size = batch_size
        self.max_frames = max_frames
        self.peak_lr = peak_lr
        self.warmup_frac = warmup_frac
        self.layer = layer
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(steps=self.steps, peak_lr=self.peak_lr, warmup_frac=self.warmup_frac,
                           batch_size=self.batch_size, max_frames=self.max_frames,
                           mask_prob=self.mask_prob, mask_length=self.mask_length,
                           alpha=self.alpha, seed=self.random_state)

    def _dataset(self, X, y):
        targets = _targets_per_utterance(y, len(X))
        return [Utterance(np.asarray(getattr(x, "data", x)), z, getattr(x, "utterance_id", "") or f"utt{i}")
                for i, (x, z) in enumerate(zip(X, targets))]

    def fit(self, X, y):
        targets = _targets_per_utterance(y, len(X))
        sizes = self.codebook_sizes
        if sizes is None:
            n_heads = len(targets[0])
            sizes = [int(max(z[k].max() for z in targets)) + 1 for k in range(n_heads)]
        input_dim = 1 if self.input_mode == "waveform" else np.asarray(getattr(X[0], "data", X[0])).shape[1]
        cfg = ModelConfig(conv=conv_layers(self.conv_channels), num_layers=self.num_layers,
                          embed_dim=self.embed_dim, ffn_dim=self.ffn_dim, num_heads=self.num_heads,
                          layerdrop_prob=self.layerdrop_prob, proj_dim=self.proj_dim, tau=self.tau,
                          codebook_sizes=tuple(sizes), input_mode=self.input_mode, input_dim=input_dim)
        self.model_ = MaskedPredictionNet(cfg, seed=self.random_state)
        result = train(self.model_, self._dataset(X, y), self._train_config())
        self.loss_curve_ = result.losses
        self.n_steps_ = result.step
        return self

    def _layer(self):
        return self.model_.num_layers // 2 if self.layer is None else self.layer

    def transform(self, X):
        check_is_fitted(self)
        return [np.asarray(f.data) for f in extract_features(self.model_, X, self._layer())]

    def score(self, X, y):
        """Masked-frame prediction accuracy of the first head."""
        check_is_fitted(self)
        res = evaluate(self.model_, self._dataset(X, y), MaskConfig(self.mask_prob, self.mask_length),
                       seed=self.random_state)
        return res["masked_acc"][0]
