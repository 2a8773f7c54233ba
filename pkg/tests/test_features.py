import math
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskunit.features import (
    MFCC,
    FeatureSequence,
    MfccConfig,
    Splicer,
    Waveform,
    compute_mfcc,
    deltas,
    load_wav,
    num_frames,
    splice,
    write_wav,
)


def _write_raw_wav(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(np.asarray(samples, dtype=f"<i{width}").tobytes())


def reference_mfcc(x, sr=16000, win=400, hop=320, n_fft=512, n_mels=23, n_ceps=13):
    """Straight-line MFCC written from the recipe, independent of the package."""
    x = [float(v) for v in x]
    emph = [x[0]] + [x[n] - 0.97 * x[n - 1] for n in range(1, len(x))]
    T = 1 + (len(emph) - win) // hop
    hamming = [0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)]

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def inv_mel(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    lo, hi = mel(0.0), mel(sr / 2)
    pts = [inv_mel(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    n_bins = n_fft // 2 + 1
    filters = []
    for m in range(n_mels):
        left, mid, right = pts[m], pts[m + 1], pts[m + 2]
        row = []
        for b in range(n_bins):
            f = b * sr / n_fft
            if left <= f <= mid:
                row.append((f - left) / (mid - left))
            elif mid < f <= right:
                row.append((right - f) / (right - mid))
            else:
                row.append(0.0)
        filters.append(row)
    filters = np.array(filters)

    # plain DFT matrix, no FFT
    n = np.arange(win)
    k = np.arange(n_bins)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)
    ceps = np.zeros((T, n_ceps))
    for t in range(T):
        frame = np.array(emph[t * hop:t * hop + win]) * np.array(hamming)
        power = np.abs(dft @ frame) ** 2
        energies = [max(float(filters[m] @ power), 1e-10) for m in range(n_mels)]
        logs = [math.log(e) for e in energies]
        for c in range(n_ceps):
            scale = math.sqrt(1.0 / n_mels) if c == 0 else math.sqrt(2.0 / n_mels)
            ceps[t, c] = scale * sum(logs[m] * math.cos(math.pi * c * (m + 0.5) / n_mels)
                                     for m in range(n_mels))

    def delta(a):
        out = np.zeros_like(a)
        for t in range(a.shape[0]):
            acc = 0.0
            for d in (1, 2):
                nxt = a[min(t + d, a.shape[0] - 1)]
                prv = a[max(t - d, 0)]
                acc = acc + d * (nxt - prv)
            out[t] = acc / 10.0
        return out

    d1 = delta(ceps)
    return np.hstack([ceps, d1, delta(d1)])


def test_zero_signal_gives_identical_frames_and_zero_deltas():
    f = compute_mfcc(Waveform(np.zeros(16000)))
    assert f.data.shape == (49, 39)
    assert np.all(f.data == f.data[0])
    assert np.all(f.data[:, 13:] == 0.0)


def test_sine_matches_reference_oracle():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 440 * t)
    got = compute_mfcc(Waveform(x)).data
    want = reference_mfcc(x)
    assert got.shape == want.shape
    # relative per coefficient; tiny delta values get an absolute floor
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-9)


def test_frame_count_for_one_second():
    assert num_frames(16000, 400, 320) == 49
    assert compute_mfcc(Waveform(np.ones(16000) * 0.1)).T == 49


@given(st.integers(1, 5000), st.integers(1, 800), st.integers(1, 800))
def test_frame_count_formula(extra, win, hop):
    n = win + extra - 1
    T = num_frames(n, win, hop)
    assert T == 1 + (n - win) // hop
    # last frame fits, one more would not
    assert (T - 1) * hop + win <= n < T * hop + win


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="shorter than one window"):
        compute_mfcc(Waveform(np.zeros(399)))


def test_mfcc_is_bitwise_deterministic(rng):
    w = Waveform(rng.uniform(-1, 1, 8000))
    a = compute_mfcc(w).data
    b = compute_mfcc(Waveform(np.array(w.samples))).data
    assert a.tobytes() == b.tobytes()


def test_load_zero_file(tmp_path):
    p = tmp_path / "zeros.wav"
    _write_raw_wav(p, np.zeros(16000, dtype=np.int16))
    w = load_wav(p)
    assert len(w) == 16000 and np.all(w.samples == 0.0)
    assert w.utterance_id == "zeros"


def test_load_scales_by_32768(tmp_path):
    p = tmp_path / "half.wav"
    _write_raw_wav(p, np.full(10, 16384, dtype=np.int16))
    assert np.all(load_wav(p).samples == 0.5)


@pytest.mark.parametrize("kw, msg", [
    (dict(rate=8000), "unsupported sample rate"),
    (dict(channels=2), "unsupported channel count"),
])
def test_load_rejects_bad_format(tmp_path, kw, msg):
    p = tmp_path / "bad.wav"
    _write_raw_wav(p, np.zeros(800, dtype=np.int16), **kw)
    with pytest.raises(ValueError, match=msg):
        load_wav(p)


def test_load_rejects_8_bit(tmp_path):
    p = tmp_path / "bad.wav"
    with wave.open(str(p), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(16000)
        fh.writeframes(bytes(100))
    with pytest.raises(ValueError, match="bit depth"):
        load_wav(p)


def test_load_rejects_non_wave(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"RIFX" + struct.pack("<I", 4) + b"junk")
    with pytest.raises(ValueError, match="RIFF/WAVE"):
        load_wav(p)


def test_wav_round_trip(tmp_path, rng):
    ints = rng.integers(-32768, 32767, 500)
    w = Waveform(ints / 32768.0, utterance_id="a")
    write_wav(tmp_path / "a.wav", w)
    assert np.array_equal(load_wav(tmp_path / "a.wav").samples, w.samples)


def test_waveform_invariants():
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), sample_rate=8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(0))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_feature_sequence_invariants():
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((2, 2)), frame_rate_hz=100, feature_kind="encoder-layer-3")
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((2, 2)), frame_rate_hz=25)
    assert FeatureSequence(np.zeros((2, 2)), 100, "mfcc").T == 2


def test_delta_of_constant_is_zero():
    assert np.all(deltas(np.full((7, 3), 2.5)) == 0.0)


@given(st.floats(-10, 10), st.integers(5, 40))
def test_delta_of_ramp_is_slope_away_from_edges(a, T):
    x = (a * np.arange(T, dtype=np.float64))[:, None]
    d = deltas(x)
    np.testing.assert_allclose(d[2:-2, 0], a, rtol=1e-12, atol=1e-12)


def test_splice_identity_window_one(rng):
    f = FeatureSequence(rng.normal(size=(5, 39)))
    assert np.array_equal(splice(f, 1).data, f.data)


def test_splice_window_three_gives_117_dims(rng):
    f = FeatureSequence(rng.normal(size=(5, 39)))
    out = splice(f, 3)
    assert out.data.shape == (5, 117)
    assert out.feature_kind == "spliced-mfcc"
    assert np.array_equal(out.data[2], np.concatenate([f.data[1], f.data[2], f.data[3]]))


def test_splice_single_frame_replicates():
    f = FeatureSequence(np.arange(4.0)[None])
    assert np.array_equal(splice(f, 3).data[0], np.tile(np.arange(4.0), 3))


@pytest.mark.parametrize("w", [0, 2, 4, -1])
def test_splice_rejects_even_window(w):
    with pytest.raises(ValueError, match="odd"):
        splice(FeatureSequence(np.zeros((3, 2))), w)


def test_splice_rejects_encoder_features():
    with pytest.raises(ValueError):
        splice(FeatureSequence(np.zeros((3, 2)), 50, "encoder-layer-1"), 3)


@settings(max_examples=50)
@given(st.integers(1, 12), st.integers(1, 5), st.sampled_from([1, 3, 5, 7]))
def test_splice_each_output_is_one_input_coordinate(T, D, w):
    data = np.arange(T * D, dtype=np.float64).reshape(T, D)
    out = splice(FeatureSequence(data), w).data
    assert out.shape == (T, w * D)
    half = w // 2
    for t in range(T):
        for k in range(w):
            src = min(max(t + k - half, 0), T - 1)
            assert np.array_equal(out[t, k * D:(k + 1) * D], data[src])


def test_estimators_follow_sklearn_api(rng):
    est = MFCC()
    assert est.get_params()["hop_length"] == 320
    out = est.fit_transform([rng.uniform(-1, 1, 16000)])
    assert out[0].shape == (49, 39)
    sp = Splicer(window=3).fit_transform(out)
    assert sp[0].shape == (49, 117)
    assert MfccConfig().frame_rate_hz == 50
