"""The masked prediction network.

Input path: conv waveform encoder (or precomputed features) -> layer norm ->
linear projection -> mask substitution -> convolutional positional
embedding -> pre-norm transformer blocks -> final layer norm -> one
cosine-similarity codeword head per codebook.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from maskunit.model.config import ModelConfig

COS_EPS = 1e-8


class NonFiniteActivation(FloatingPointError):
    pass


def conv_output_length(n, conv):
    """Frames produced by a stack of valid convolutions from ``n`` inputs."""
    for _, kernel, stride in conv:
        if n < kernel:
            return 0
        n = (n - kernel) // stride + 1
    return n


def receptive_field(conv):
    """``(field, hop)``: samples seen by one output frame and samples between frames."""
    field, hop = 1, 1
    for _, kernel, stride in conv:
        field += (kernel - 1) * hop
        hop *= stride
    return field, hop


class ConvFeatureEncoder(nn.Module):
    def __init__(self, conv):
        super().__init__()
        layers = []
        in_ch = 1
        for i, (ch, kernel, stride) in enumerate(conv):
            block = [nn.Conv1d(in_ch, ch, kernel, stride=stride, bias=False)]
            if i == 0:
                block.append(nn.GroupNorm(ch, ch))
            block.append(nn.GELU())
            layers.append(nn.Sequential(*block))
            in_ch = ch
        self.layers = nn.ModuleList(layers)
        self.conv = tuple(conv)

    def forward(self, wav):
        """``(B, L)`` samples -> ``(B, T, C)`` frames."""
        if conv_output_length(wav.shape[-1], self.conv) < 1:
            raise ValueError(f"waveform of {wav.shape[-1]} samples is shorter than the receptive field")
        x = wav.unsqueeze(1)
        for layer in self.layers:
            x = layer(x)
        return x.transpose(1, 2)


class SelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        B, T, E = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.reshape(B, T, h, E // h).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(E // h)
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, E))


class Block(nn.Module):
    def __init__(self, dim, ffn_dim, num_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PositionalConv(nn.Module):
    def __init__(self, dim, kernel, groups):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)
        self.trim = kernel % 2 == 0

    def forward(self, x):
        y = self.conv(x.transpose(1, 2))
        if self.trim:
            y = y[..., :-1]
        return F.gelu(y).transpose(1, 2)


def cosine_logits(proj, emb, tau):
    """``cos(proj_t, emb_c) / tau`` with ``COS_EPS`` added to both norms."""
    pn = proj.norm(dim=-1, keepdim=True) + COS_EPS
    en = emb.norm(dim=-1, keepdim=True) + COS_EPS
    return (proj / pn) @ (emb / en).transpose(0, 1) / tau


class MaskedPredictionNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        if cfg.input_mode == "waveform":
            self.frontend = ConvFeatureEncoder(cfg.conv)
            in_dim = cfg.conv[-1][0]
        else:
            self.frontend = None
            in_dim = cfg.input_dim
        self.feature_norm = nn.LayerNorm(in_dim)
        self.input_proj = nn.Linear(in_dim, cfg.embed_dim)
        self.mask_emb = nn.Parameter(torch.empty(cfg.embed_dim))
        self.pos_conv = PositionalConv(cfg.embed_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.ffn_dim, cfg.num_heads) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.heads = nn.ModuleList(nn.Linear(cfg.embed_dim, cfg.proj_dim) for _ in cfg.codebook_sizes)
        self.codewords = nn.ParameterList(
            nn.Parameter(torch.empty(c, cfg.proj_dim)) for c in cfg.codebook_sizes
        )
        self._init_parameters(gen)

    def _init_parameters(self, gen):
        for name, p in self.named_parameters():
            if name == "mask_emb" or name.startswith("codewords"):
                continue
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() == 1:
                nn.init.ones_(p)
            else:
                fan_in = p[0].numel()
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
        with torch.no_grad():
            self.mask_emb.copy_(0.1 * torch.randn(self.cfg.embed_dim, generator=gen))
            # codewords share one direction plus a small jitter, so initial
            # cosine logits are nearly uniform and the loss starts near ln C
            for emb in self.codewords:
                shared = torch.randn(emb.shape[1], generator=gen)
                emb.copy_(shared + 0.1 * torch.randn(emb.shape, generator=gen))

    @property
    def num_layers(self):
        return len(self.blocks)

    def frames(self, x):
        """Per-frame input features before projection, ``(B, T, C)``."""
        if self.frontend is not None:
            return self.frontend(x)
        return x

    def encode(self, x, mask=None, layerdrop_gen=None):
        """Hidden states ``[h_0, ..., h_N]``, each ``(B, T, E)``.

        ``h_0`` is the projected, masked transformer input. ``mask`` is a
        ``(B, T)`` boolean tensor of frames to replace by the mask embedding.
        """
        h = self.input_proj(self.feature_norm(self.frames(x)))
        if mask is not None:
            h = torch.where(mask.unsqueeze(-1), self.mask_emb.to(h.dtype), h)
        if not torch.isfinite(h).all():
            raise NonFiniteActivation("non-finite activation at transformer layer 0")
        states = [h]
        h = h + self.pos_conv(h)
        for i, block in enumerate(self.blocks):
            skip = (self.training and self.cfg.layerdrop_prob > 0
                    and torch.rand((), generator=layerdrop_gen).item() < self.cfg.layerdrop_prob)
            if not skip:
                h = block(h)
            if not torch.isfinite(h).all():
                raise NonFiniteActivation(f"non-finite activation after transformer layer {i + 1}")
            states.append(h)
        return states

    def logits(self, o):
        """Codeword logits per head, each ``(B, T, C_k)``."""
        return [cosine_logits(head(o), emb, self.cfg.tau) for head, emb in zip(self.heads, self.codewords)]

    def forward(self, x, mask=None, layerdrop_gen=None):
        states = self.encode(x, mask, layerdrop_gen)
        o = self.final_norm(states[-1])
        return self.logits(o), states
