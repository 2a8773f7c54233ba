"""Target-quality metrics from the phone/unit co-occurrence table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContingencyTable:
    """Counts of frames with phone ``i`` (rows) and unit ``j`` (columns)."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise ValueError("contingency counts must be a matrix")
        if np.any(c < 0):
            raise ValueError("negative counts")
        if c.sum() <= 0:
            raise ValueError("no frames")
        object.__setattr__(self, "counts", c)

    @property
    def N(self):
        return self.counts.sum()

    @property
    def joint(self) -> np.ndarray:
        return self.counts.astype(np.float64) / float(self.N)

    @property
    def p_y(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def p_z(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    @property
    def best_unit(self) -> np.ndarray:
        """Most likely unit for each phone (lowest index on ties)."""
        return np.argmax(self.counts, axis=1)

    @property
    def best_phone(self) -> np.ndarray:
        """Most likely phone for each unit (lowest index on ties)."""
        return np.argmax(self.counts, axis=0)

    def report(self) -> dict:
        return {
            "phone_purity": phone_purity(self),
            "cluster_purity": cluster_purity(self),
            "pnmi": pnmi(self),
            "num_phones": int(self.counts.shape[0]),
            "num_units": int(self.counts.shape[1]),
            "num_frames": int(self.N),
        }


def build_contingency(pairs, num_phones=None, num_units=None) -> ContingencyTable:
    """Count co-occurrences over ``(phone_labels, unit_labels)`` pairs.

    Each element of ``pairs`` is a 2-tuple of label sequences, optionally
    preceded by an utterance id used in error messages.
    """
    ys, zs = [], []
    for k, pair in enumerate(pairs):
        if len(pair) == 3:
            utt, y, z = pair
        else:
            (y, z), utt = pair, f"#{k}"
        y = np.asarray(getattr(y, "labels", y), dtype=np.int64)
        z = np.asarray(getattr(z, "labels", z), dtype=np.int64)
        if y.shape != z.shape:
            raise ValueError(f"utterance {utt}: {y.shape[0]} phone labels vs {z.shape[0]} unit labels")
        ys.append(y)
        zs.append(z)
    if not ys or sum(y.size for y in ys) == 0:
        raise ValueError("no frames")
    y = np.concatenate(ys)
    z = np.concatenate(zs)
    if y.min() < 0 or z.min() < 0:
        raise ValueError("labels must be non-negative")
    n_y = max(int(y.max()) + 1, num_phones or 0)
    n_z = max(int(z.max()) + 1, num_units or 0)
    counts = np.bincount(y * n_z + z, minlength=n_y * n_z).reshape(n_y, n_z)
    return ContingencyTable(counts)


def _table(t):
    return t if isinstance(t, ContingencyTable) else ContingencyTable(np.asarray(t))


def phone_purity(t) -> float:
    """Frame accuracy when every unit is read as its majority phone."""
    t = _table(t)
    # sum_j p_z(j) * max_i p(i|j) == sum_j max_i p_yz(i, j); empty columns add 0
    return float(t.counts.max(axis=0).sum() / t.N)


def cluster_purity(t) -> float:
    """Frame accuracy when every phone is read as its majority unit."""
    t = _table(t)
    return float(t.counts.max(axis=1).sum() / t.N)


def pnmi(t) -> float:
    """Fraction of phone entropy explained by the unit label, ``I(y; z) / H(y)``.

    Probability ratios are formed from integer count products, so a diagonal
    table gives exactly 1.0 and an outer-product table exactly 0.0.
    """
    t = _table(t)
    n = t.counts
    N = n.sum()
    n_y = n.sum(axis=1)
    n_z = n.sum(axis=0)
    rows = n_y > 0
    h_y = float((n_y[rows] / N * np.log(N / n_y[rows])).sum())
    if h_y <= 0:
        raise ValueError("degenerate phone distribution: H(y) = 0")
    i, j = np.nonzero(n)
    nij = n[i, j]
    ratio = (nij * N) / (n_y[i] * n_z[j])
    mi = float((nij / N * np.log(ratio)).sum())
    return mi / h_y


def label_metrics(phones, units) -> dict:
    """Metrics report for aligned label dicts keyed by utterance id."""
    missing = [u for u in units if u not in phones]
    if missing:
        raise ValueError(f"no phone labels for utterance {missing[0]}")
    table = build_contingency((u, phones[u], units[u]) for u in units)
    return table.report()
