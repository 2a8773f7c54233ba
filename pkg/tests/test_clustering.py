import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from maskunit.clustering import (
    ClusterEnsemble,
    Codebook,
    KMeansTeacher,
    LabelSequence,
    ProductQuantizer,
    assign,
    check_partition,
    kmeanspp_init,
    kmeanspp_seeding,
    lloyd_fit,
    load_codebooks,
    minibatch_kmeans_fit,
    pq_fit,
    select_utterances,
    start_seeds,
    subsample_frames,
)
from maskunit.features import FeatureSequence
from maskunit.io import write_feature_dir


def brute_potential(X, C):
    total = 0.0
    for x in X:
        total += min(float(((x - c) ** 2).sum()) for c in C)
    return total


def brute_labels(X, C):
    out = []
    for x in X:
        best, best_d = 0, None
        for k, c in enumerate(C):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(x, c))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def two_blobs(rng, n, dim=2, sep=20.0, sigma=1.0):
    a = rng.normal(0, sigma, (n // 2, dim))
    b = rng.normal(0, sigma, (n - n // 2, dim))
    b[:, 0] += sep * sigma
    return np.vstack([a, b])


def sorted_rows(C):
    C = np.asarray(C)
    return C[np.lexsort(C.T[::-1])]


# k-means++ seeding

def test_kmeanspp_single_cluster(rng):
    X = rng.normal(size=(30, 3))
    cb = kmeanspp_init(X, 1, n_starts=5, seed=2)
    assert any(np.allclose(cb.centroids[0], x.astype(np.float32)) for x in X)
    assert cb.inertia == pytest.approx(brute_potential(X, cb.centroids.astype(np.float64)), rel=1e-6)


def test_kmeanspp_saturated(rng):
    X = rng.normal(size=(12, 2))
    cb = kmeanspp_init(X, 12, n_starts=3, seed=0)
    assert cb.inertia == 0.0
    assert np.array_equal(sorted_rows(cb.centroids), sorted_rows(X.astype(np.float32)))


def test_kmeanspp_saturated_with_duplicates():
    X = np.repeat(np.arange(4.0)[:, None], 3, axis=0)
    cb = kmeanspp_init(X, 12, n_starts=2, seed=0)
    assert cb.inertia == 0.0 and cb.K == 12


def test_kmeanspp_errors(rng):
    with pytest.raises(ValueError, match="fewer points than clusters"):
        kmeanspp_init(rng.normal(size=(3, 2)), 4)
    with pytest.raises(ValueError):
        kmeanspp_init(rng.normal(size=(3, 2)), 2, n_starts=0)


def test_kmeanspp_two_blobs_one_seed_each():
    hits = 0
    for trial in range(100):
        r = np.random.default_rng(trial)
        X = two_blobs(r, 40)
        cb = kmeanspp_init(X, 2, n_starts=20, seed=trial)
        C = cb.centroids.astype(np.float64)
        side = C[:, 0] > 10
        hits += side.sum() == 1
        # the reported potential is the exhaustive one for the chosen seeds
        assert cb.inertia == pytest.approx(brute_potential(X, C), rel=1e-6)
    assert hits >= 99


def test_kmeanspp_returns_min_over_independent_starts(rng):
    X = rng.normal(size=(200, 3))
    cb = kmeanspp_init(X, 5, n_starts=7, seed=11)
    pots = [kmeanspp_seeding(X, 5, ss)[1] for ss in start_seeds(11, 7)]
    assert cb.inertia == min(pots)


# Lloyd

def test_lloyd_single_cluster_is_mean(rng):
    X = rng.normal(3.0, 2.0, (500, 4))
    cb, _ = lloyd_fit(X, 1)
    np.testing.assert_allclose(cb.centroids[0], X.mean(axis=0).astype(np.float32), rtol=1e-6)


def test_lloyd_repeated_points_zero_inertia():
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 7.0]])
    X = np.repeat(pts, 20, axis=0)
    cb, _ = lloyd_fit(X, 3, seed=4)
    assert cb.inertia == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_lloyd_inertia_non_increasing(seed):
    X = np.random.default_rng(seed).normal(size=(100, 2))
    _, hist = lloyd_fit(X, 3, seed=seed, n_starts=1)
    assert len(hist) >= 2
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_lloyd_errors(rng):
    with pytest.raises(ValueError, match="fewer points"):
        lloyd_fit(rng.normal(size=(2, 2)), 3)


# mini-batch

def test_minibatch_single_cluster_matches_mean(rng):
    X = rng.normal(5.0, 1.0, (10_000, 3))
    cb = minibatch_kmeans_fit(iter(np.array_split(X, 7)), 1, batch_size=1000, n_starts=1)
    np.testing.assert_allclose(cb.centroids[0], X.mean(axis=0), rtol=1e-2)


def test_minibatch_two_blobs_close_to_lloyd(rng):
    X = two_blobs(rng, 10_000, dim=2)
    ref, _ = lloyd_fit(X, 2, seed=0)
    stream = (X[rng.permutation(len(X))[:1000]] for _ in range(50))
    cb = minibatch_kmeans_fit(stream, 2, batch_size=1000, max_batches=50, seed=0)
    from maskunit.clustering import inertia
    assert inertia(X, cb.centroids) <= 1.05 * ref.inertia


def test_minibatch_single_pass_is_one_lloyd_step(rng):
    X = rng.normal(size=(300, 2))
    K = 4
    init = kmeanspp_init(X, K, n_starts=3, seed=9).centroids.astype(np.float64)
    labels = brute_labels(X, init)
    expected = np.array([X[labels == k].mean(axis=0) for k in range(K)])
    cb = minibatch_kmeans_fit([X], K, batch_size=300, max_batches=1, seed=9, n_starts=3)
    np.testing.assert_allclose(cb.centroids, expected.astype(np.float32), rtol=1e-6)
    assert cb.n_batches == 1


def test_minibatch_default_batch_size():
    import inspect
    assert inspect.signature(minibatch_kmeans_fit).parameters["batch_size"].default == 10000


def test_minibatch_empty_stream():
    with pytest.raises(ValueError, match="empty stream"):
        minibatch_kmeans_fit(iter([]), 2)


def test_minibatch_stops_on_tolerance():
    X = np.repeat(np.array([[0.0], [10.0]]), 50, axis=0)
    cb = minibatch_kmeans_fit((X for _ in range(100)), 2, batch_size=100, max_batches=100, seed=0)
    assert cb.n_batches < 100


def test_minibatch_deterministic(rng):
    X = rng.normal(size=(2000, 3))
    a = minibatch_kmeans_fit(iter(np.array_split(X, 4)), 5, batch_size=500, seed=3)
    b = minibatch_kmeans_fit(iter(np.array_split(X, 4)), 5, batch_size=500, seed=3)
    assert a.centroids.tobytes() == b.centroids.tobytes()


# assignment

def test_assign_exact_centroid():
    C = np.arange(30, dtype=np.float32).reshape(10, 3)
    f = FeatureSequence(C[7:8].astype(np.float64))
    assert assign(Codebook(C), f).labels.tolist() == [7]


def test_assign_tie_goes_to_lowest_index():
    C = np.array([[1.0, 0.0], [5.0, 5.0], [9.0, 9.0], [-1.0, 0.0]])
    assert assign(Codebook(C), np.zeros((1, 2))).labels.tolist() == [0]


@pytest.mark.parametrize("n", [50, 1000])
def test_assign_matches_brute_force(rng, n):
    C = rng.normal(size=(13, 4)).astype(np.float32)
    X = rng.normal(size=(n, 4))
    assert np.array_equal(assign(Codebook(C), X).labels, brute_labels(X, C))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_assign_is_nearest(seed):
    r = np.random.default_rng(seed)
    C = r.normal(size=(6, 3)).astype(np.float32)
    X = r.normal(size=(20, 3))
    z = assign(Codebook(C), X).labels
    d = ((X[:, None, :] - C[None].astype(np.float64)) ** 2).sum(-1)
    assert np.all(d[np.arange(20), z][:, None] <= d + 1e-12)


def test_assign_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        assign(Codebook(np.zeros((2, 5))), np.zeros((3, 4)))


# product quantization

def test_partition_checks():
    check_partition([[0, 1], [2]], 3)
    with pytest.raises(ValueError, match="overlap"):
        check_partition([[0, 1], [1, 2]], 3)
    with pytest.raises(ValueError, match="cover"):
        check_partition([[0], [2]], 3)
    with pytest.raises(ValueError):
        pq_fit(np.zeros((10, 3)), [[0, 1], [1, 2]], 2)


def test_pq_spliced_mfcc_shape(rng):
    X = rng.normal(size=(3000, 117))
    parts = [list(range(39 * k, 39 * (k + 1))) for k in range(3)]
    ens = pq_fit(X, parts, 100, seed=0, batch_size=1000, max_batches=6, n_starts=2)
    assert ens.sizes == [100, 100, 100]
    assert ens.target_space_size == 100 ** 3
    assert ens.partition == parts


def test_pq_single_subspace_is_plain_kmeans(rng):
    X = rng.normal(size=(400, 3))
    ens = pq_fit(X, [[0, 1, 2]], 4, seed=5, method="lloyd")
    cb, _ = lloyd_fit(X, 4, seed=5)
    assert np.array_equal(ens.codebooks[0].centroids, cb.centroids)


def test_pq_matches_per_subspace_refit(rng):
    # independent subspaces: each codebook must equal a standalone fit with the same seed
    X = np.hstack([two_blobs(rng, 600, dim=2), rng.normal(size=(600, 3)) * 3])
    parts = [[0, 1], [2, 3, 4]]
    ens = pq_fit(X, parts, 3, seed=7, batch_size=200, max_batches=30, n_starts=4)
    for cb, dims in zip(ens.codebooks, parts):
        solo = pq_fit(X[:, dims], [list(range(len(dims)))], 3, seed=7,
                      batch_size=200, max_batches=30, n_starts=4).codebooks[0]
        assert np.array_equal(sorted_rows(cb.centroids), sorted_rows(solo.centroids))


def test_pq_assignment_is_tuple_of_subspace_assignments(rng):
    X = rng.normal(size=(500, 6))
    parts = [[0, 3], [1, 2, 5], [4]]
    ens = pq_fit(X, parts, 5, seed=1, method="lloyd")
    Z = ens.assign(X)
    for k, (cb, dims) in enumerate(zip(ens.codebooks, parts)):
        assert np.array_equal(Z[:, k], assign(Codebook(cb.centroids), X[:, dims]).labels)


# subsampling

def test_subsample_full_fraction(rng):
    feats = [rng.normal(size=(3, 2)) for _ in range(10)]
    assert len(list(subsample_frames(feats, 1.0, seed=0))) == 10


@pytest.mark.parametrize("seed", range(10))
def test_subsample_binomial_bounds(seed):
    n = int(select_utterances(1000, 0.1, seed).sum())
    assert 60 <= n <= 140


def test_subsample_deterministic_and_ordered(tmp_path, rng):
    feats = [FeatureSequence(rng.normal(size=(2, 2)), 50, "synthetic", f"u{i:02d}") for i in range(40)]
    write_feature_dir(tmp_path, feats)
    a = list(subsample_frames(tmp_path, 0.3, seed=4))
    b = list(subsample_frames(tmp_path / "manifest.tsv", 0.3, seed=4))
    assert len(a) == len(b) > 0
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    keep = np.flatnonzero(select_utterances(40, 0.3, 4))
    for x, i in zip(a, keep):
        assert np.array_equal(x, feats[i].data.astype(np.float32))


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_subsample_fraction_range(frac):
    with pytest.raises(ValueError, match="fraction"):
        list(subsample_frames([np.zeros((1, 1))], frac))


# types and storage

def test_codebook_invariants():
    with pytest.raises(ValueError):
        Codebook(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Codebook(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Codebook(np.zeros((2, 2)), dims=(0, 0))


def test_label_sequence_range():
    with pytest.raises(ValueError):
        LabelSequence(np.array([0, 3]), K=3)


def test_codebook_round_trip(tmp_path, rng):
    cb = Codebook(rng.normal(size=(7, 4)), "spliced-mfcc", (2, 5, 6, 9))
    cb.save(tmp_path / "a.mucb")
    back = Codebook.load(tmp_path / "a.mucb")
    assert back == cb
    assert back.centroids.tobytes() == cb.centroids.tobytes()
    assert load_codebooks(tmp_path / "a.mucb")[0] == cb


def test_codebook_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        Codebook.load(tmp_path / "x")


def test_ensemble_round_trip(tmp_path, rng):
    ens = pq_fit(rng.normal(size=(100, 4)), [[0, 1], [2, 3]], 3, method="lloyd")
    ens.save(tmp_path / "ens")
    back = ClusterEnsemble.load(tmp_path / "ens")
    assert back == ens and back.product
    assert len(load_codebooks(tmp_path / "ens")) == 2


# estimator API

def test_kmeans_teacher_api(rng):
    X = two_blobs(rng, 400)
    est = KMeansTeacher(n_clusters=2, batch_size=100, n_starts=3, max_batches=20)
    assert clone(est).get_params() == est.get_params()
    labels = est.fit_predict(X)
    assert set(labels) == {0, 1}
    assert est.transform(X).shape == (400, 2)
    assert est.score(X) == pytest.approx(-est.inertia_)
    assert est.codebook_.K == 2
    est.set_params(algorithm="lloyd")
    assert est.fit(X).n_batches_ is None


def test_kmeans_teacher_refit_per_start(rng):
    X = rng.normal(size=(300, 2))
    a = KMeansTeacher(n_clusters=4, algorithm="lloyd", n_starts=3, refit_per_start=True).fit(X)
    for ss in start_seeds(0, 3):
        cb, _ = lloyd_fit(X, 4, seed=ss)
        assert a.inertia_ <= cb.inertia * (1 + 1e-6)


def test_kmeans_teacher_accepts_feature_list(rng):
    feats = [FeatureSequence(rng.normal(size=(20, 3))) for _ in range(3)]
    est = KMeansTeacher(n_clusters=3, algorithm="lloyd", n_starts=1).fit(feats)
    assert est.labels_.shape == (60,)


def test_product_quantizer_api(rng):
    X = rng.normal(size=(300, 6))
    pq = ProductQuantizer(n_clusters=4, n_subspaces=3, algorithm="lloyd", n_starts=2).fit(X)
    codes = pq.predict(X)
    assert codes.shape == (300, 3)
    assert pq.ensemble_.partition == [[0, 1], [2, 3], [4, 5]]
