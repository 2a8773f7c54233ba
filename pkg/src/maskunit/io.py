"""On-disk formats: feature files, manifests, label files.

All binary formats are little-endian. Codebook and checkpoint formats live
next to the types they serialize.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from maskunit.features import FeatureSequence

FEATURE_MAGIC = b"MULF"
FEATURE_VERSION = 1
FEATURE_MANIFEST = "manifest.tsv"

_HEADER = struct.Struct("<4sIQIIB")

_ENCODER_BASE = 16


def kind_to_code(kind: str) -> int:
    fixed = {"mfcc": 0, "spliced-mfcc": 1, "synthetic": 2}
    if kind in fixed:
        return fixed[kind]
    m = re.fullmatch(r"encoder-layer-(\d+)", kind)
    if m is None or int(m.group(1)) > 255 - _ENCODER_BASE:
        raise ValueError(f"cannot encode feature kind {kind!r}")
    return _ENCODER_BASE + int(m.group(1))


def code_to_kind(code: int) -> str:
    fixed = {0: "mfcc", 1: "spliced-mfcc", 2: "synthetic"}
    if code in fixed:
        return fixed[code]
    if code >= _ENCODER_BASE:
        return f"encoder-layer-{code - _ENCODER_BASE}"
    raise ValueError(f"unknown feature kind code {code}")


def write_features(path, f: FeatureSequence):
    data = np.ascontiguousarray(f.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f.T, f.D,
                              f.frame_rate_hz, kind_to_code(f.feature_kind)))
        fh.write(data.tobytes())


def read_features(path) -> FeatureSequence:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        magic, version, T, D, rate, kind = _HEADER.unpack(head)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        body = fh.read()
    if len(body) != 4 * T * D:
        raise ValueError(f"{path}: expected {T}x{D} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(T, D)
    return FeatureSequence(data, frame_rate_hz=rate, feature_kind=code_to_kind(kind),
                           utterance_id=path.stem)


def write_manifest(path, root, entries):
    """``entries`` is an iterable of ``(relative_path, length)``."""
    lines = [str(root)] + [f"{rel}\t{int(n)}" for rel, n in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Return ``(root, [(relative_path, length), ...])``.

    A relative root is taken relative to the manifest's own directory.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    root = Path(lines[0].strip())
    if not root.is_absolute():
        root = (Path(path).resolve().parent / root).resolve()
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>length'")
        entries.append((parts[0], int(parts[1])))
    return root, entries


def manifest_paths(path):
    root, entries = read_manifest(path)
    return [root / rel for rel, _ in entries]


def write_feature_dir(out_dir, features):
    """Write one ``.mulf`` file per sequence plus a manifest listing them in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in features:
        name = f"{f.utterance_id}.mulf"
        write_features(out_dir / name, f)
        entries.append((name, f.T))
    write_manifest(out_dir / FEATURE_MANIFEST, ".", entries)
    return out_dir / FEATURE_MANIFEST


def feature_dir_manifest(path) -> Path:
    """Accept either a feature directory or a manifest file."""
    path = Path(path)
    if path.is_dir():
        path = path / FEATURE_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no feature manifest at {path}")
    return path


def iter_feature_dir(path):
    for p in manifest_paths(feature_dir_manifest(path)):
        yield read_features(p)


def write_labels(path, labels):
    """``labels`` maps utterance id to an integer sequence; order is preserved."""
    with open(path, "w") as fh:
        for utt, seq in labels.items():
            fh.write(utt + " " + " ".join(str(int(v)) for v in seq) + "\n")


def read_labels(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            utt = parts[0]
            if utt in out:
                raise ValueError(f"{path}:{lineno}: duplicate utterance {utt}")
            out[utt] = np.array([int(v) for v in parts[1:]], dtype=np.int64)
    return out
