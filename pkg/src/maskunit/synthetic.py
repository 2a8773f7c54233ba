"""Synthetic corpora with known frame-level phone labels.

Phones follow a sparse Markov chain; each phone occupies a run of frames
whose features are Gaussian around a per-phone anchor. Frame labels are
the generating phone, so teacher quality can be measured exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from maskunit.features import FeatureSequence
from maskunit.io import write_feature_dir, write_labels


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_phones: int = 20
    min_frames: int = 3
    max_frames: int = 8
    emission_dim: int = 39
    noise_sigma: float = 1.2
    anchor_distance: float = 4.0
    successors: int = 3
    num_utterances: int = 200
    mean_length: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_phones < 2:
            raise ValueError("need at least two phone classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if self.num_utterances < 1 or self.mean_length < 1:
            raise ValueError("need at least one non-empty utterance")


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    features: list
    phones: dict
    anchors: np.ndarray
    transitions: np.ndarray

    @property
    def utterance_ids(self):
        return [f.utterance_id for f in self.features]

    def save(self, out_dir):
        """Write ``features/`` (feature files + manifest) and ``phones.txt``."""
        out_dir = Path(out_dir)
        manifest = write_feature_dir(out_dir / "features", self.features)
        write_labels(out_dir / "phones.txt", self.phones)
        return manifest


def _anchors(spec, rng):
    # random Gaussian points in D dims sit about scale * sqrt(2D) apart
    scale = spec.anchor_distance / np.sqrt(2 * spec.emission_dim)
    return rng.standard_normal((spec.num_phones, spec.emission_dim)) * scale


def _transitions(spec, rng):
    P = np.zeros((spec.num_phones, spec.num_phones))
    k = min(spec.successors, spec.num_phones - 1)
    for i in range(spec.num_phones):
        others = np.delete(np.arange(spec.num_phones), i)
        nxt = rng.choice(others, size=k, replace=False)
        P[i, nxt] = rng.dirichlet(np.ones(k))
    return P


def gen_synthetic_corpus(spec: SyntheticCorpusSpec = SyntheticCorpusSpec()) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    anchors = _anchors(spec, rng)
    P = _transitions(spec, rng)
    lo, hi = max(1, int(0.8 * spec.mean_length)), max(1, int(1.2 * spec.mean_length))
    features, phones = [], {}
    width = len(str(spec.num_utterances - 1))
    for u in range(spec.num_utterances):
        T = int(rng.integers(lo, hi + 1))
        labels = np.empty(T, dtype=np.int64)
        t = 0
        phone = int(rng.integers(spec.num_phones))
        while t < T:
            dur = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            labels[t:t + dur] = phone
            t += dur
            phone = int(rng.choice(spec.num_phones, p=P[phone]))
        data = anchors[labels] + spec.noise_sigma * rng.standard_normal((T, spec.emission_dim))
        utt = f"syn{u:0{width}d}"
        features.append(FeatureSequence(data.astype(np.float32), 50, "synthetic", utt))
        phones[utt] = labels
    return SyntheticCorpus(spec, features, phones, anchors, P)


def corrupt_labels(labels, fraction, num_classes, seed=0):
    """Replace a random ``fraction`` of frames by uniformly drawn labels."""
    rng = np.random.default_rng(seed)
    out = {}
    for utt, z in labels.items():
        z = np.asarray(z).copy()
        hit = rng.random(z.shape[0]) < fraction
        z[hit] = rng.integers(num_classes, size=int(hit.sum()))
        out[utt] = z
    return out


def spec_dict(spec: SyntheticCorpusSpec) -> dict:
    return asdict(spec)
