from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

# (channels, kernel, stride) per layer; 320x downsampling of 16 kHz audio
CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)


def conv_layers(channels):
    return tuple((channels, k, s) for k, s in zip(CONV_KERNELS, CONV_STRIDES))


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the masked prediction network.

    Defaults are a desk-scale reduction of the base configuration; use
    :meth:`preset` for the full-size shapes.
    """

    conv: tuple = conv_layers(32)
    num_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 2
    layerdrop_prob: float = 0.0
    proj_dim: int = 32
    tau: float = 0.1
    codebook_sizes: tuple = (100,)
    input_mode: str = "precomputed-features"
    input_dim: int = 39
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in layer) for layer in self.conv))
        object.__setattr__(self, "codebook_sizes", tuple(int(c) for c in self.codebook_sizes))
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.input_mode not in ("waveform", "precomputed-features"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        dims = [self.embed_dim, self.ffn_dim, self.num_heads, self.proj_dim, self.input_dim,
                self.pos_conv_kernel, self.pos_conv_groups]
        if min(dims) < 1 or self.num_layers < 0:
            raise ValueError("all model dimensions must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.embed_dim % self.pos_conv_groups:
            raise ValueError("embed_dim must be divisible by pos_conv_groups")
        if not self.codebook_sizes or min(self.codebook_sizes) < 1:
            raise ValueError("need at least one codebook of size >= 1")
        if not 0 <= self.layerdrop_prob < 1:
            raise ValueError("layerdrop_prob must be in [0, 1)")
        if self.input_mode == "waveform" and not self.conv:
            raise ValueError("waveform input needs a convolutional encoder")

    @classmethod
    def preset(cls, name, **overrides):
        shapes = {
            "base": dict(num_layers=12, embed_dim=768, ffn_dim=3072, layerdrop_prob=0.05,
                         num_heads=8, proj_dim=256),
            "large": dict(num_layers=24, embed_dim=1024, ffn_dim=4096, layerdrop_prob=0.0,
                          num_heads=16, proj_dim=768),
            "x-large": dict(num_layers=48, embed_dim=1280, ffn_dim=5120, layerdrop_prob=0.0,
                            num_heads=16, proj_dim=1024),
        }
        kw = dict(conv=conv_layers(512), input_mode="waveform", pos_conv_kernel=128,
                  pos_conv_groups=16, **shapes[name])
        kw.update(overrides)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation schedule. Peak LR and step count are desk-scale defaults."""

    steps: int = 2000
    peak_lr: float = 2e-3
    warmup_frac: float = 0.08
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-6
    batch_size: int = 8
    max_frames: int = 200
    mask_prob: float = 0.08
    mask_length: int = 10
    alpha: float = 1.0
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
