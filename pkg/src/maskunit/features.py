"""Waveform loading, MFCC extraction and frame splicing."""

from __future__ import annotations

import re
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

SAMPLE_RATE = 16000

_KIND_RE = re.compile(r"^(mfcc|spliced-mfcc|synthetic|encoder-layer-(\d+))$")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    utterance_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"unsupported sample rate {self.sample_rate} (need {SAMPLE_RATE})")
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D signal")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class FeatureSequence:
    """A ``T x D`` frame matrix with its frame rate and provenance tag.

    ``feature_kind`` is one of ``mfcc``, ``spliced-mfcc``, ``synthetic`` or
    ``encoder-layer-<k>``.
    """

    data: np.ndarray
    frame_rate_hz: int = 50
    feature_kind: str = "mfcc"
    utterance_id: str = ""
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature matrix must be T x D with T, D >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"non-finite feature values in {self.utterance_id or 'sequence'}")
        if not _KIND_RE.match(self.feature_kind):
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        if self.feature_kind.startswith("encoder-layer") and self.frame_rate_hz != 50:
            raise ValueError("encoder features are produced at 50 Hz")
        if self.frame_rate_hz not in (50, 100):
            raise ValueError(f"unsupported frame rate {self.frame_rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.T

    def with_data(self, data, feature_kind=None) -> "FeatureSequence":
        return FeatureSequence(
            data,
            frame_rate_hz=self.frame_rate_hz,
            feature_kind=feature_kind or self.feature_kind,
            utterance_id=self.utterance_id,
        )


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM 16 kHz WAV file, scaling samples to [-1, 1)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        fh = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise ValueError(f"{path}: not a RIFF/WAVE PCM file ({exc})") from None
    with fh:
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: unsupported sample rate {fh.getframerate()}")
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: unsupported channel count {fh.getnchannels()}")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: unsupported bit depth {8 * fh.getsampwidth()}")
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, SAMPLE_RATE, path.stem)


def write_wav(path, w: Waveform):
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())


@dataclass(frozen=True)
class MfccConfig:
    """MFCC recipe. Hop defaults to 20 ms so frames line up with the 50 Hz encoder."""

    win_length: int = 400
    hop_length: int = 320
    n_fft: int = 512
    n_mels: int = 23
    n_ceps: int = 13
    fmin: float = 0.0
    fmax: float = 8000.0
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    delta_width: int = 2

    @property
    def frame_rate_hz(self) -> int:
        return SAMPLE_RATE // self.hop_length


def num_frames(n_samples: int, win_length: int, hop_length: int) -> int:
    if n_samples < win_length:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one window ({win_length})")
    return 1 + (n_samples - win_length) // hop_length


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def dct_matrix(n_out, n_in):
    """Orthonormal DCT-II basis, rows are output coefficients."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    basis[0] /= np.sqrt(2.0)
    return basis


def deltas(x, width=2):
    """Regression deltas over +/- ``width`` frames with edge replication."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(x)
    for d in range(1, width + 1):
        num += d * (padded[width + d:width + d + T] - padded[width - d:width - d + T])
    return num / (2 * sum(d * d for d in range(1, width + 1)))


def _frame(signal, win_length, hop_length):
    n = num_frames(signal.shape[0], win_length, hop_length)
    idx = np.arange(win_length)[None, :] + hop_length * np.arange(n)[:, None]
    return signal[idx]


def compute_mfcc(w: Waveform, cfg: MfccConfig | None = None) -> FeatureSequence:
    """13 cepstra (c0..c12) plus first and second order deltas, 39 dims per frame."""
    cfg = cfg or MfccConfig()
    x = np.asarray(w.samples, dtype=np.float64)
    x = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    frames = _frame(x, cfg.win_length, cfg.hop_length) * np.hamming(cfg.win_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, cfg.n_fft, SAMPLE_RATE, cfg.fmin, cfg.fmax)
    logmel = np.log(np.maximum(power @ fbank.T, cfg.log_floor))
    ceps = logmel @ dct_matrix(cfg.n_ceps, cfg.n_mels).T
    d1 = deltas(ceps, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return FeatureSequence(
        np.hstack([ceps, d1, d2]),
        frame_rate_hz=cfg.frame_rate_hz,
        feature_kind="mfcc",
        utterance_id=w.utterance_id,
    )


def splice(f: FeatureSequence, window: int) -> FeatureSequence:
    """Concatenate each frame with its neighbours; edges are replicated."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"splice window must be a positive odd integer, got {window}")
    if f.feature_kind not in ("mfcc", "synthetic"):
        raise ValueError(f"cannot splice {f.feature_kind} features")
    half = window // 2
    padded = np.pad(np.asarray(f.data), ((half, half), (0, 0)), mode="edge")
    out = np.hstack([padded[k:k + f.T] for k in range(window)])
    kind = "spliced-mfcc" if f.feature_kind == "mfcc" else f.feature_kind
    return f.with_data(out, feature_kind=kind)


def _as_waveform(x, i=0):
    if isinstance(x, Waveform):
        return x
    return Waveform(np.asarray(x, dtype=np.float64), SAMPLE_RATE, f"utt{i}")


class MFCC(TransformerMixin, BaseEstimator):
    """Stateless transformer from waveforms to 39-dim MFCC feature sequences.

    ``transform`` takes a list of :class:`Waveform` (or 1-D sample arrays) and
    returns a list of ``(T, 39)`` arrays.
    """

    def __init__(self, win_length=400, hop_length=320, n_fft=512, n_mels=23,
                 n_ceps=13, preemphasis=0.97):
        self.win_length = win_length
        self.hop_length = hop_length
        self.n_fft = n_fft
        self.n_mels = n_mels
        self.n_ceps = n_ceps
        self.preemphasis = preemphasis

    def _config(self):
        return MfccConfig(
            win_length=self.win_length,
            hop_length=self.hop_length,
            n_fft=self.n_fft,
            n_mels=self.n_mels,
            n_ceps=self.n_ceps,
            preemphasis=self.preemphasis,
        )

    def fit(self, X, y=None):
        self.n_features_out_ = 3 * self.n_ceps
        return self

    def transform(self, X):
        cfg = self._config()
        return [np.asarray(compute_mfcc(_as_waveform(x, i), cfg).data) for i, x in enumerate(X)]


class Splicer(TransformerMixin, BaseEstimator):
    def __init__(self, window=3):
        self.window = window

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for x in X:
            f = x if isinstance(x, FeatureSequence) else FeatureSequence(x)
            out.append(np.asarray(splice(f, self.window).data))
        return out
