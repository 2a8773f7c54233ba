"""Hidden-unit discovery with k-means.

Fitting routines work on plain ``(N, D)`` arrays; :class:`KMeansTeacher`
and :class:`ProductQuantizer` wrap them in the scikit-learn estimator API.
Distances are always accumulated in float64; codebook centroids are stored
as float32 so a saved codebook assigns exactly like the in-memory one.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from maskunit.features import FeatureSequence
from maskunit.io import code_to_kind, feature_dir_manifest, kind_to_code, read_features, read_manifest

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"MUCB"
CODEBOOK_VERSION = 1
_CB_HEADER = struct.Struct("<4sIIIBI")


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    feature_kind: str = "mfcc"
    dims: tuple = ()
    inertia: float | None = field(default=None, compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("codebook needs at least one centroid")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite centroid")
        dims = tuple(int(d) for d in self.dims) if len(self.dims) else tuple(range(c.shape[1]))
        if len(dims) != c.shape[1] or len(set(dims)) != len(dims) or min(dims) < 0:
            raise ValueError(f"dims {dims} do not match a {c.shape[1]}-dim codebook")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "dims", dims)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (self.feature_kind == other.feature_kind and self.dims == other.dims
                and np.array_equal(self.centroids, other.centroids))

    __hash__ = None

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_CB_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.K, self.D,
                                     kind_to_code(self.feature_kind), len(self.dims)))
            fh.write(np.asarray(self.dims, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        blob = Path(path).read_bytes()
        magic, version, K, D, kind, n_dims = _CB_HEADER.unpack_from(blob)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CODEBOOK_VERSION:
            raise ValueError(f"{path}: unsupported codebook version {version}")
        off = _CB_HEADER.size
        dims = np.frombuffer(blob, dtype="<u4", count=n_dims, offset=off)
        off += 4 * n_dims
        cents = np.frombuffer(blob, dtype="<f4", count=K * D, offset=off).reshape(K, D)
        return cls(cents.copy(), code_to_kind(kind), tuple(int(d) for d in dims))


@dataclass(frozen=True)
class ClusterEnsemble:
    """Ordered codebooks used as parallel targets.

    With ``product=True`` the partition must split the feature dimensions
    into disjoint, covering subspaces.
    """

    codebooks: tuple
    product: bool = False

    def __post_init__(self):
        object.__setattr__(self, "codebooks", tuple(self.codebooks))
        if not self.codebooks:
            raise ValueError("empty ensemble")
        if self.product:
            check_partition(self.partition, sum(len(p) for p in self.partition))

    @property
    def partition(self):
        return [list(cb.dims) for cb in self.codebooks]

    @property
    def sizes(self):
        return [cb.K for cb in self.codebooks]

    @property
    def target_space_size(self) -> int:
        return int(np.prod([cb.K for cb in self.codebooks], dtype=object))

    def assign(self, f) -> np.ndarray:
        """``(T, n_codebooks)`` label matrix; column k comes from codebook k alone."""
        return np.stack([assign(cb, f).labels for cb in self.codebooks], axis=1)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for k, cb in enumerate(self.codebooks):
            name = f"codebook{k}.mucb"
            cb.save(directory / name)
            names.append(name)
        index = {"codebooks": names, "partition": self.partition, "product": self.product}
        (directory / "index.json").write_text(json.dumps(index, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "ClusterEnsemble":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        cbs = [Codebook.load(directory / name) for name in index["codebooks"]]
        for cb, part in zip(cbs, index["partition"]):
            if list(cb.dims) != list(part):
                raise ValueError(f"{directory}: partition does not match codebook dims")
        return cls(tuple(cbs), product=bool(index.get("product", False)))


@dataclass(frozen=True)
class LabelSequence:
    labels: np.ndarray
    K: int
    utterance_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise ValueError(f"labels outside [0, {self.K})")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


def load_codebooks(path):
    """Load a single codebook file or an ensemble directory as a list of codebooks."""
    path = Path(path)
    if path.is_dir():
        return list(ClusterEnsemble.load(path).codebooks)
    return [Codebook.load(path)]


def check_partition(partition, n_dims):
    seen = []
    for part in partition:
        if not len(part):
            raise ValueError("empty subspace in partition")
        seen.extend(int(d) for d in part)
    if len(seen) != len(set(seen)):
        raise ValueError("partition subspaces overlap")
    if sorted(seen) != list(range(n_dims)):
        raise ValueError(f"partition does not cover dimensions 0..{n_dims - 1}")


def sq_distances(X, centroids):
    """Squared Euclidean distances in float64, computed from explicit differences."""
    return cdist(np.asarray(X, dtype=np.float64), np.asarray(centroids, dtype=np.float64),
                 "sqeuclidean")


def nearest(X, centroids):
    """Labels (lowest index wins ties) and squared distance to the chosen centroid."""
    d = sq_distances(X, centroids)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(d.shape[0]), labels]


def inertia(X, centroids) -> float:
    return float(nearest(X, centroids)[1].sum())


def _as_2d(data):
    X = np.asarray(data)
    if X.ndim != 2:
        raise ValueError(f"expected an (N, D) matrix, got shape {X.shape}")
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    return X


def _kmeanspp_single(X, K, rng):
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    closest = sq_distances(X, X[chosen]).ravel()
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            # every point coincides with a seed; draw among the unused ones
            free = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, sq_distances(X, X[idx:idx + 1]).ravel())
    return np.array(chosen), float(closest.sum())


def start_seeds(seed, n_starts):
    """Independent per-start seed sequences derived from one root seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n_starts)


def kmeanspp_seeding(data, K, seed):
    """One k-means++ seeding; returns ``(indices, potential)``."""
    X = _as_2d(data)
    return _kmeanspp_single(X, K, np.random.default_rng(seed))


def kmeanspp_init(data, K, n_starts=20, seed=0, feature_kind="mfcc") -> Codebook:
    """Best of ``n_starts`` k-means++ seedings by potential (sum of squared distances)."""
    X = _as_2d(data)
    N = X.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if N < K:
        raise ValueError(f"fewer points than clusters ({N} < {K})")
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    best = None
    for ss in start_seeds(seed, n_starts):
        idx, pot = _kmeanspp_single(X, K, np.random.default_rng(ss))
        if best is None or pot < best[1]:
            best = (idx, pot)
    return Codebook(X[best[0]], feature_kind, inertia=best[1])


def lloyd_fit(data, K, seed=0, max_iters=300, n_starts=1, feature_kind="mfcc"):
    """Exact batch k-means from a k-means++ start.

    The returned codebook carries the final inertia; ``history`` on the
    returned tuple lists the inertia before every update, ending with the
    converged value.
    """
    X = _as_2d(data)
    X64 = X.astype(np.float64)
    N = X.shape[0]
    if N < K:
        raise ValueError(f"fewer points than clusters ({N} < {K})")
    C = kmeanspp_init(X, K, n_starts, seed, feature_kind).centroids.astype(np.float64)
    history = []
    prev = None
    for _ in range(max_iters):
        labels, d = nearest(X64, C)
        history.append(float(d.sum()))
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X64)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            far = np.argsort(-d, kind="stable")
            for c, i in zip(empty, far):
                C[c] = X64[i]
            log.debug("lloyd: reseeded %d empty clusters", empty.size)
    else:
        history.append(inertia(X64, C))
    # inertia is reported for the float32 codebook actually returned
    cb = Codebook(C, feature_kind)
    final = inertia(X64, cb.centroids)
    cb = Codebook(cb.centroids, feature_kind, inertia=final)
    return cb, history


def _rebatch(stream: Iterable, batch_size: int) -> Iterator[np.ndarray]:
    buf, n = [], 0
    for chunk in stream:
        chunk = np.asarray(chunk.data if isinstance(chunk, FeatureSequence) else chunk)
        if chunk.ndim != 2:
            raise ValueError("stream items must be (n, D) frame batches")
        while chunk.shape[0]:
            take = min(batch_size - n, chunk.shape[0])
            buf.append(chunk[:take])
            n += take
            chunk = chunk[take:]
            if n == batch_size:
                yield np.concatenate(buf)
                buf, n = [], 0
    if n:
        yield np.concatenate(buf)


def minibatch_kmeans_fit(stream, K, batch_size=10000, max_batches=None, seed=0,
                         n_starts=20, init_size=None, tol=1e-4, feature_kind="mfcc"):
    """Streaming mini-batch k-means with per-centroid ``1/count`` learning rates.

    The first ``init_size`` frames (default three batches) seed k-means++ and
    are then consumed as ordinary batches. Stops after ``max_batches`` or once
    no centroid moves more than ``tol`` within a batch. The returned
    codebook's ``inertia`` is measured on the last batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = _rebatch(stream, batch_size)
    init_size = max(init_size or 3 * batch_size, K)
    head, n = [], 0
    for b in batches:
        head.append(b)
        n += b.shape[0]
        if n >= init_size:
            break
    if not head:
        raise ValueError("empty stream")
    init_data = np.concatenate(head)
    if init_data.shape[0] < K:
        raise ValueError(f"fewer points than clusters ({init_data.shape[0]} < {K})")
    C = kmeanspp_init(init_data, K, n_starts, seed, feature_kind).centroids.astype(np.float64)
    counts = np.zeros(K, dtype=np.int64)

    def all_batches():
        yield from head
        yield from batches

    n_done, last_inertia = 0, None
    for batch in all_batches():
        if max_batches is not None and n_done >= max_batches:
            break
        B = np.asarray(batch, dtype=np.float64)
        labels, d = nearest(B, C)
        last_inertia = float(d.sum())
        old = C.copy()
        bc = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, B)
        hit = bc > 0
        counts[hit] += bc[hit]
        C[hit] += (sums[hit] - bc[hit, None] * C[hit]) / counts[hit, None]
        dead = np.flatnonzero(counts == 0)
        if dead.size:
            far = np.argsort(-d, kind="stable")
            for c, i in zip(dead, far):
                C[c] = B[i]
        n_done += 1
        shift = float(np.sqrt(((C - old) ** 2).sum(axis=1)).max())
        if shift < tol:
            log.debug("mini-batch k-means converged after %d batches", n_done)
            break
    cb = Codebook(C, feature_kind, inertia=last_inertia)
    object.__setattr__(cb, "n_batches", n_done)
    return cb


def assign(cb: Codebook, f, utterance_id=None) -> LabelSequence:
    """Nearest-centroid labels over the codebook's input dimensions."""
    data = np.asarray(f.data if isinstance(f, FeatureSequence) else f)
    if data.ndim != 2:
        raise ValueError("expected a (T, D) feature matrix")
    if max(cb.dims) >= data.shape[1]:
        raise ValueError(f"codebook needs dimension {max(cb.dims)} but features have {data.shape[1]}")
    if cb.dims != tuple(range(data.shape[1])):
        data = data[:, list(cb.dims)]
    labels, _ = nearest(data, cb.centroids)
    if utterance_id is None:
        utterance_id = f.utterance_id if isinstance(f, FeatureSequence) else ""
    return LabelSequence(labels, cb.K, utterance_id)


def pq_fit(data, partition, K_per_subspace, seed=0, method="minibatch", **fit_kw) -> ClusterEnsemble:
    """Fit one codebook per disjoint subspace; every subspace uses the same seed."""
    X = _as_2d(data)
    partition = [list(p) for p in partition]
    check_partition(partition, X.shape[1])
    Ks = [K_per_subspace] * len(partition) if np.isscalar(K_per_subspace) else list(K_per_subspace)
    if len(Ks) != len(partition):
        raise ValueError("one K per subspace required")
    kind = fit_kw.pop("feature_kind", "mfcc")
    cbs = []
    for dims, K in zip(partition, Ks):
        sub = X[:, dims]
        if method == "lloyd":
            cb, _ = lloyd_fit(sub, K, seed=seed, feature_kind=kind, **fit_kw)
        else:
            stream = _epoch_stream(sub, fit_kw.get("batch_size", 10000), seed,
                                   fit_kw.get("max_batches") or 100)
            cb = minibatch_kmeans_fit(stream, K, seed=seed, feature_kind=kind, **fit_kw)
        cbs.append(Codebook(cb.centroids, kind, tuple(dims), inertia=cb.inertia))
    return ClusterEnsemble(tuple(cbs), product=True)


def contiguous_partition(n_dims, n_subspaces):
    return [list(a) for a in np.array_split(np.arange(n_dims), n_subspaces)]


def select_utterances(n_utterances, fraction, seed):
    """Boolean mask from per-utterance Bernoulli(fraction) draws."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return np.ones(n_utterances, dtype=bool)
    return np.random.default_rng(seed).random(n_utterances) < fraction


def subsample_frames(manifest, fraction, seed=0) -> Iterator[np.ndarray]:
    """Yield the frame matrices of a random utterance subset, in manifest order.

    ``manifest`` is a feature manifest/directory, or a sequence of feature
    arrays already in memory.
    """
    if isinstance(manifest, (str, Path)):
        root, entries = read_manifest(feature_dir_manifest(manifest))
        keep = select_utterances(len(entries), fraction, seed)
        return (np.asarray(read_features(root / rel).data)
                for (rel, _), k in zip(entries, keep) if k)
    items = list(manifest)
    keep = select_utterances(len(items), fraction, seed)
    return (np.asarray(x.data if isinstance(x, FeatureSequence) else x)
            for x, k in zip(items, keep) if k)


def _epoch_stream(X, batch_size, seed, max_batches):
    """Random mini-batches drawn epoch by epoch without replacement."""
    rng = np.random.default_rng(seed)
    N = X.shape[0]
    produced = 0
    while produced < max_batches:
        perm = rng.permutation(N)
        for start in range(0, N, batch_size):
            yield X[perm[start:start + batch_size]]
            produced += 1
            if produced >= max_batches:
                return


def _stack_input(X):
    if isinstance(X, (list, tuple)):
        X = np.concatenate([np.asarray(x.data if isinstance(x, FeatureSequence) else x) for x in X])
    return check_array(X, dtype=[np.float64, np.float32])


class KMeansTeacher(ClusterMixin, TransformerMixin, BaseEstimator):
    """k-means unit discovery with a scikit-learn interface.

    Parameters
    ----------
    n_clusters : int
        Number of hidden units.
    algorithm : {"minibatch", "lloyd"}
        Streaming mini-batch updates, or exact batch iterations.
    batch_size : int
        Frames per mini-batch.
    n_starts : int
        k-means++ seedings; the lowest-potential one is kept.
    max_batches : int
        Mini-batch budget (ignored by ``lloyd``).
    max_iter : int
        Lloyd iteration budget.
    tol : float
        Centroid displacement below which mini-batch fitting stops.
    refit_per_start : bool
        Run a full fit per start and keep the lowest inertia, instead of
        only picking the best seeding.
    random_state : int
    """

    def __init__(self, n_clusters=100, algorithm="minibatch", batch_size=10000, n_starts=20,
                 max_batches=100, max_iter=300, tol=1e-4, refit_per_start=False, random_state=0):
        self.n_clusters = n_clusters
        self.algorithm = algorithm
        self.batch_size = batch_size
        self.n_starts = n_starts
        self.max_batches = max_batches
        self.max_iter = max_iter
        self.tol = tol
        self.refit_per_start = refit_per_start
        self.random_state = random_state

    def _fit_once(self, X, seed, n_starts):
        if self.algorithm == "lloyd":
            cb, _ = lloyd_fit(X, self.n_clusters, seed=seed, max_iters=self.max_iter, n_starts=n_starts)
            return cb, None
        if self.algorithm != "minibatch":
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        stream = _epoch_stream(X, self.batch_size, seed, self.max_batches)
        cb = minibatch_kmeans_fit(stream, self.n_clusters, batch_size=self.batch_size,
                                  max_batches=self.max_batches, seed=seed, n_starts=n_starts,
                                  tol=self.tol)
        return cb, cb.n_batches

    def fit(self, X, y=None):
        X = _stack_input(X)
        if X.shape[0] < self.n_clusters:
            raise ValueError(f"fewer points than clusters ({X.shape[0]} < {self.n_clusters})")
        if self.refit_per_start:
            best = None
            for ss in start_seeds(self.random_state, self.n_starts):
                cb, nb = self._fit_once(X, ss, 1)
                score = inertia(X, cb.centroids)
                if best is None or score < best[2]:
                    best = (cb, nb, score)
            cb, nb, _ = best
        else:
            cb, nb = self._fit_once(X, self.random_state, self.n_starts)
        self.cluster_centers_ = np.asarray(cb.centroids)
        labels, d = nearest(X, self.cluster_centers_)
        self.labels_ = labels
        self.inertia_ = float(d.sum())
        self.n_batches_ = nb
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def codebook_(self) -> Codebook:
        check_is_fitted(self)
        return Codebook(self.cluster_centers_, inertia=self.inertia_)

    def predict(self, X):
        check_is_fitted(self)
        X = _stack_input(X)
        return nearest(X, self.cluster_centers_)[0]

    def transform(self, X):
        check_is_fitted(self)
        return np.sqrt(sq_distances(_stack_input(X), self.cluster_centers_))

    def score(self, X, y=None):
        check_is_fitted(self)
        return -inertia(_stack_input(X), self.cluster_centers_)


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """Independent k-means per feature subspace.

    ``partition`` lists the dimension subsets; when ``None`` the features are
    split into ``n_subspaces`` contiguous blocks. ``predict`` returns one code
    column per subspace.
    """

    def __init__(self, n_clusters=100, partition=None, n_subspaces=3, algorithm="minibatch",
                 batch_size=10000, n_starts=20, max_batches=100, random_state=0):
        self.n_clusters = n_clusters
        self.partition = partition
        self.n_subspaces = n_subspaces
        self.algorithm = algorithm
        self.batch_size = batch_size
        self.n_starts = n_starts
        self.max_batches = max_batches
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _stack_input(X)
        partition = self.partition or contiguous_partition(X.shape[1], self.n_subspaces)
        kw = {}
        if self.algorithm == "minibatch":
            kw = dict(batch_size=self.batch_size, max_batches=self.max_batches, n_starts=self.n_starts)
        else:
            kw = dict(n_starts=self.n_starts)
        self.ensemble_ = pq_fit(X, partition, self.n_clusters, seed=self.random_state,
                                method=self.algorithm, **kw)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return self.ensemble_.assign(_stack_input(X))

    def transform(self, X):
        return self.predict(X)
