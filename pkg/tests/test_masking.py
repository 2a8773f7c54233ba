import random
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskunit.features import FeatureSequence
from maskunit.masking import MaskConfig, MaskSpec, corrupt, mask_seed, num_starts, sample_mask


def exact_masked_fraction(T, p, l):
    """Frame t stays clear iff no start falls in the w_t = min(t+1, l) slots ending at t."""
    n = int(np.floor(p * T + 0.5))
    total = comb(T, n)
    clear = sum(comb(T - min(t + 1, l), n) for t in range(T))
    return 1.0 - clear / (T * total)


def monte_carlo_fraction(T, p, l, draws, seed):
    # independent sampler: stdlib random, explicit span loop
    r = random.Random(seed)
    n = int(np.floor(p * T + 0.5))
    hit = 0
    for _ in range(draws):
        masked = set()
        for s in r.sample(range(T), n):
            masked.update(range(s, min(s + l, T)))
        hit += len(masked)
    return hit / (draws * T)


def test_p_zero_gives_empty_mask():
    m = sample_mask(100, MaskConfig(0.0, 10), seed=0)
    assert len(m) == 0 and not m.bool_mask.any()


def test_defaults():
    cfg = MaskConfig()
    assert (cfg.p, cfg.l) == (0.08, 10)


def test_round_half_up():
    assert num_starts(25, 0.1) == 3  # 2.5 rounds up
    assert num_starts(15, 0.1) == 2  # 1.5 rounds up
    assert num_starts(4, 0.1) == 0


def test_short_sequence_yields_empty_mask():
    m = sample_mask(5, MaskConfig(0.08, 10), seed=1)
    assert len(m) == 0


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(1.5, 10)
    with pytest.raises(ValueError):
        MaskConfig(0.1, 0)
    with pytest.raises(ValueError):
        sample_mask(0, MaskConfig(), 0)


def test_exact_oracle_agrees_with_monte_carlo_oracle():
    exact = exact_masked_fraction(1000, 0.08, 10)
    mc = monte_carlo_fraction(1000, 0.08, 10, draws=2000, seed=3)
    assert abs(exact - mc) < 0.005


def test_mean_fraction_matches_exact_oracle():
    cfg = MaskConfig(0.08, 10)
    frac = np.mean([len(sample_mask(1000, cfg, seed=s)) / 1000 for s in range(2000)])
    assert abs(frac - exact_masked_fraction(1000, 0.08, 10)) < 0.005


@settings(max_examples=60)
@given(st.integers(1, 300), st.floats(0, 1), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_mask_structure(T, p, l, seed):
    m = sample_mask(T, MaskConfig(p, l), seed=seed)
    n = num_starts(T, p)
    assert len(m.starts) == n == len(set(m.starts.tolist()))
    expected = set()
    for s in m.starts:
        expected.update(range(s, min(s + l, T)))
    assert m.masked.tolist() == sorted(expected)
    assert len(m) <= l * n
    again = sample_mask(T, MaskConfig(p, l), seed=seed)
    assert np.array_equal(m.masked, again.masked)


def test_mask_seed_depends_on_utterance_and_epoch():
    cfg = MaskConfig(0.1, 5)
    a = sample_mask(200, cfg, mask_seed(0, "utt1", 0)).masked
    assert np.array_equal(a, sample_mask(200, cfg, mask_seed(0, "utt1", 0)).masked)
    assert not np.array_equal(a, sample_mask(200, cfg, mask_seed(0, "utt2", 0)).masked)
    assert not np.array_equal(a, sample_mask(200, cfg, mask_seed(0, "utt1", 1)).masked)


def test_mask_spec_rejects_unsorted():
    with pytest.raises(ValueError):
        MaskSpec(np.array([3, 1]), 5, 0.1, 2)
    with pytest.raises(ValueError):
        MaskSpec(np.array([5]), 5, 0.1, 2)


def _spec(idx, T):
    return MaskSpec(np.array(idx, dtype=np.int64), T, 0.0, 1)


def test_corrupt_empty_mask_is_identity(rng):
    f = FeatureSequence(rng.normal(size=(6, 3)))
    out = corrupt(f, _spec([], 6), np.ones(3))
    assert np.array_equal(out.data, f.data)


def test_corrupt_full_mask(rng):
    f = FeatureSequence(rng.normal(size=(6, 3)))
    out = corrupt(f, _spec(range(6), 6), np.array([1.0, 2.0, 3.0]))
    assert np.all(out.data == [1.0, 2.0, 3.0])


def test_corrupt_middle_rows(rng):
    f = FeatureSequence(rng.normal(size=(6, 3)))
    emb = np.full(3, 9.0)
    out = corrupt(f, _spec([2, 3, 4], 6), emb).data
    assert np.array_equal(out[[0, 1, 5]], f.data[[0, 1, 5]])
    assert np.all(out[2:5] == 9.0)


def test_corrupt_is_idempotent(rng):
    x = rng.normal(size=(30, 4))
    m = sample_mask(30, MaskConfig(0.2, 3), seed=5)
    once = corrupt(x, m, np.zeros(4))
    assert np.array_equal(corrupt(once, m, np.zeros(4)), once)


def test_corrupt_rejects_mismatch(rng):
    x = rng.normal(size=(6, 3))
    with pytest.raises(ValueError):
        corrupt(x, _spec([1], 7), np.zeros(3))
    with pytest.raises(ValueError):
        corrupt(x, _spec([1], 6), np.zeros(4))
