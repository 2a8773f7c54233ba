"""Span masking: start selection, span union, and input corruption."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np

from maskunit.features import FeatureSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskConfig:
    p: float = 0.08
    l: int = 10

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask start fraction must be in [0, 1], got {self.p}")
        if self.l < 1:
            raise ValueError(f"mask span must be >= 1, got {self.l}")


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray
    T: int
    p: float
    l: int
    starts: np.ndarray = None

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=np.int64)
        if masked.size and (masked[0] < 0 or masked[-1] >= self.T or np.any(np.diff(masked) <= 0)):
            raise ValueError("masked indices must be sorted, unique and inside [0, T)")
        masked.setflags(write=False)
        object.__setattr__(self, "masked", masked)

    @property
    def bool_mask(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=bool)
        out[self.masked] = True
        return out

    def __len__(self):
        return self.masked.shape[0]


def num_starts(T, p):
    # round half up, not banker's rounding
    return int(math.floor(p * T + 0.5))


def spans_to_mask(starts, T, l):
    out = np.zeros(T, dtype=bool)
    for s in starts:
        out[s:min(s + l, T)] = True
    return out


def sample_mask(T, cfg: MaskConfig = MaskConfig(), seed=None) -> MaskSpec:
    """Draw ``round(p*T)`` distinct span starts; overlapping spans merge, spans clip at T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = num_starts(T, cfg.p)
    if n == 0 and cfg.p > 0:
        log.debug("sequence of %d frames too short for any mask start at p=%g", T, cfg.p)
    starts = np.sort(rng.choice(T, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    masked = np.flatnonzero(spans_to_mask(starts, T, cfg.l))
    return MaskSpec(masked, T, cfg.p, cfg.l, starts)


def mask_seed(root_seed, utterance_id, epoch=0):
    """Seed sequence for one (utterance, epoch) pair, stable across platforms."""
    return np.random.SeedSequence([int(root_seed), zlib.crc32(utterance_id.encode()), int(epoch)])


def corrupt(f, m: MaskSpec, mask_embedding):
    """Replace masked rows by ``mask_embedding``; other rows are returned untouched."""
    data = f.data if isinstance(f, FeatureSequence) else f
    data = np.asarray(data)
    emb = np.asarray(mask_embedding)
    if data.shape[0] != m.T:
        raise ValueError(f"mask is for T={m.T}, features have T={data.shape[0]}")
    if emb.shape != (data.shape[1],):
        raise ValueError(f"mask embedding has shape {emb.shape}, expected ({data.shape[1]},)")
    out = data.copy()
    out[m.masked] = emb
    if isinstance(f, FeatureSequence):
        return f.with_data(out)
    return out
