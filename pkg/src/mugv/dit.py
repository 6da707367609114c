"""Diffusion transformer over patchified latent grids.

Blocks follow a language-model layout: modulated self-attention with 3D RoPE
and QK RMS-norm, then normalized cross-attention to text, then a modulated
FFN.  Global scalars (per-token timestep, per-sample fps) go through one
shared MLP; each block owns only a learned scale vector over that shared
embedding and all blocks share the modulation projection.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, InputError

PATCH = 2


def default_rope_split(head_dim: int, extents: tuple[int, int, int]) -> tuple[int, int, int]:
    """Split ``head_dim`` across (t, h, w) proportionally to grid extents, even and >= 2 each."""
    if head_dim % 2 or head_dim < 6:
        raise ConfigurationError("head_dim must be even and at least 6 for a 3-axis split")
    pairs = head_dim // 2
    total = float(sum(extents))
    raw = [max(1.0, pairs * e / total) for e in extents]
    split = [max(1, int(round(r))) for r in raw]
    while sum(split) > pairs:
        i = max(range(3), key=lambda k: (split[k] - raw[k], split[k]))
        split[i] -= 1
    while sum(split) < pairs:
        i = max(range(3), key=lambda k: raw[k] - split[k])
        split[i] += 1
    return tuple(2 * s for s in split)


@dataclass
class DiTConfig:
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    head_dim: int = 16
    text_dim: int = 32
    c_z: int = 24
    rope_split: tuple[int, int, int] = (4, 6, 6)
    ffn_mult: int = 4
    freq_dim: int = 64
    rope_base: float = 10000.0
    vocab: int = 4096
    max_text_len: int = 64

    def __post_init__(self):
        self.rope_split = tuple(int(s) for s in self.rope_split)
        if min(self.depth, self.hidden, self.heads, self.head_dim, self.text_dim, self.c_z) < 1:
            raise ConfigurationError("all DiT sizes must be positive")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigurationError(
                f"hidden={self.hidden} must equal heads*head_dim={self.heads * self.head_dim}")
        check_rope_split(self.rope_split, self.head_dim)
        if self.freq_dim % 2:
            raise ConfigurationError("freq_dim must be even")

    @property
    def patch_dim(self) -> int:
        return PATCH * PATCH * self.c_z

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["rope_split"] = list(self.rope_split)
        return d


# Widths recorded for documentation only; never instantiated at desk scale.
PAPER_SMALL = dict(depth=56, hidden=1728, heads=48, head_dim=36, text_dim=4096, c_z=24,
                   rope_split=(12, 12, 12))
PAPER_LARGE = dict(depth=56, hidden=3456, heads=96, head_dim=36, text_dim=4096, c_z=24,
                   rope_split=(12, 12, 12))


def check_rope_split(split, head_dim: int) -> None:
    if len(split) != 3 or any(s <= 0 or s % 2 for s in split):
        raise ConfigurationError(f"rope_split {tuple(split)} must be three even positive sizes")
    if sum(split) != head_dim:
        raise ConfigurationError(f"rope_split {tuple(split)} must sum to head_dim={head_dim}")


class TokenGrid(NamedTuple):
    tokens: torch.Tensor  # (..., N, D)
    coords: torch.Tensor  # (N, 3) long, row-major (t, h, w)
    dims: tuple[int, int, int]


def grid_coords(dims: tuple[int, int, int]) -> torch.Tensor:
    t, h, w = dims
    tt, hh, ww = torch.meshgrid(torch.arange(t), torch.arange(h), torch.arange(w), indexing="ij")
    return torch.stack([tt, hh, ww], dim=-1).reshape(-1, 3)


def patchify(latents: torch.Tensor) -> TokenGrid:
    """(..., U, h, w, C) latent grid -> (..., U*(h/2)*(w/2), 4C) raw patch tokens.

    Each token is a flattened 2x2xC block in (dy, dx, c) order.
    """
    *lead, u, h, w, c = latents.shape
    if h % PATCH or w % PATCH:
        raise DimensionError(f"latent spatial dims ({h}, {w}) must be divisible by {PATCH}")
    hp, wp = h // PATCH, w // PATCH
    x = latents.reshape(*lead, u, hp, PATCH, wp, PATCH, c)
    nl = len(lead)
    perm = list(range(nl)) + [nl + i for i in (0, 1, 3, 2, 4, 5)]
    x = x.permute(*perm).reshape(*lead, u * hp * wp, PATCH * PATCH * c)
    dims = (u, hp, wp)
    return TokenGrid(x, grid_coords(dims), dims)


def unpatchify(grid: TokenGrid) -> torch.Tensor:
    """Inverse of ``patchify``; tokens are placed by their coords, so order does not matter."""
    tokens, coords, dims = grid
    u, hp, wp = dims
    *lead, n, d = tokens.shape
    if n != u * hp * wp or coords.shape != (n, 3):
        raise DimensionError(f"{n} tokens / coords {tuple(coords.shape)} do not match grid {dims}")
    if d % (PATCH * PATCH):
        raise DimensionError(f"token dim {d} is not a multiple of {PATCH * PATCH}")
    c = d // (PATCH * PATCH)
    flat = (coords[:, 0] * hp + coords[:, 1]) * wp + coords[:, 2]
    if flat.unique().numel() != n or flat.min() < 0 or flat.max() >= n:
        raise DimensionError("coords do not enumerate the grid exactly once")
    ordered = torch.empty_like(tokens)
    ordered[..., flat, :] = tokens
    x = ordered.reshape(*lead, u, hp, wp, PATCH, PATCH, c)
    nl = len(lead)
    perm = list(range(nl)) + [nl + i for i in (0, 1, 3, 2, 4, 5)]
    return x.permute(*perm).reshape(*lead, u, hp * PATCH, wp * PATCH, c)


def rope_angles(coords: torch.Tensor, split, base: float = 10000.0) -> torch.Tensor:
    """Per-token rotation angles, (N, head_dim/2), computed in float64."""
    coords = coords.to(torch.float64)
    parts = []
    for axis, d in enumerate(split):
        inv_freq = base ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
        parts.append(coords[:, axis, None] * inv_freq)
    return torch.cat(parts, dim=-1)


def apply_rope3d(x: torch.Tensor, coords: torch.Tensor, split, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs of x[..., N, head_dim]; the t, h, w slices use their own coordinate."""
    check_rope_split(split, x.shape[-1])
    ang = rope_angles(coords, split, base)
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6, affine: bool = True):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim)) if affine else None

    def forward(self, x):
        y = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return y * self.weight if self.weight is not None else y


def tokenize(prompt: str, vocab: int = 4096) -> list[int]:
    """Hashing tokenizer: lowercase whitespace words -> crc32 mod vocab."""
    return [zlib.crc32(w.encode("utf-8")) % vocab for w in prompt.lower().split()]


class TextEncoder(nn.Module):
    """Stand-in text encoder: embedding lookup followed by RMS normalization."""

    def __init__(self, vocab: int = 4096, text_dim: int = 32, max_len: int = 64):
        super().__init__()
        self.vocab, self.max_len = vocab, max_len
        self.table = nn.Embedding(vocab, text_dim)
        self.null = nn.Parameter(torch.randn(1, text_dim) * 0.02)
        self.norm = RMSNorm(text_dim, affine=False)

    def forward(self, ids) -> tuple[torch.Tensor, bool]:
        ids = list(ids)
        if not ids:
            return self.null, False
        truncated = len(ids) > self.max_len
        ids = ids[: self.max_len]
        if min(ids) < 0 or max(ids) >= self.vocab:
            raise InputError(f"token ids must lie in [0, {self.vocab})")
        return self.norm(self.table(torch.tensor(ids))), truncated

    def batch(self, id_lists) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad a list of prompts to (B, L, D) with a boolean key mask (True = real token)."""
        embs = [self(ids)[0] for ids in id_lists]
        length = max(e.shape[0] for e in embs)
        out = embs[0].new_zeros(len(embs), length, embs[0].shape[-1])
        mask = torch.zeros(len(embs), length, dtype=torch.bool)
        for i, e in enumerate(embs):
            out[i, : e.shape[0]] = e
            mask[i, : e.shape[0]] = True
        return out, mask


def text_embed(ids, encoder: TextEncoder) -> tuple[torch.Tensor, bool]:
    return encoder(ids)


def sinusoidal(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
    args = x[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class GlobalEmbedder(nn.Module):
    """Shared MLP for every global scalar, plus one learned scale vector per block."""

    def __init__(self, hidden: int, depth: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.block_scales = nn.Parameter(torch.ones(depth, hidden))

    def forward(self, timesteps: torch.Tensor, fps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # timesteps (B, N) in [0, 1]; fps (B,)
        t_emb = self.mlp(sinusoidal(timesteps * 1000.0, self.freq_dim))
        f_emb = self.mlp(sinusoidal(fps, self.freq_dim))
        return t_emb + f_emb[:, None, :], self.block_scales


def global_embed(timesteps, fps, embedder: GlobalEmbedder):
    timesteps = torch.as_tensor(timesteps)
    if timesteps.numel() and (timesteps.min() < 0 or timesteps.max() > 1):
        raise InputError("timesteps must lie in [0, 1]")
    return embedder(timesteps, torch.as_tensor(fps, dtype=timesteps.dtype))


def _attend(q, k, v, key_mask=None):
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class SelfAttention(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.q, self.k, self.v, self.o = (nn.Linear(h, h) for _ in range(4))
        self.q_norm = RMSNorm(cfg.head_dim)
        self.k_norm = RMSNorm(cfg.head_dim)

    def split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.cfg.heads, self.cfg.head_dim).transpose(1, 2)

    def forward(self, x, coords):
        cfg = self.cfg
        q = apply_rope3d(self.q_norm(self.split(self.q(x))), coords, cfg.rope_split, cfg.rope_base)
        k = apply_rope3d(self.k_norm(self.split(self.k(x))), coords, cfg.rope_split, cfg.rope_base)
        out = _attend(q, k, self.split(self.v(x)))
        return self.o(out.transpose(1, 2).reshape(x.shape))


class CrossAttention(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.q = nn.Linear(cfg.hidden, cfg.hidden)
        self.k = nn.Linear(cfg.text_dim, cfg.hidden)
        self.v = nn.Linear(cfg.text_dim, cfg.hidden)
        self.o = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, x, text, text_mask):
        b, n, _ = x.shape
        heads, hd = self.cfg.heads, self.cfg.head_dim
        q = self.q(x).reshape(b, n, heads, hd).transpose(1, 2)
        k = self.k(text).reshape(b, -1, heads, hd).transpose(1, 2)
        v = self.v(text).reshape(b, -1, heads, hd).transpose(1, 2)
        out = _attend(q, k, v, text_mask)
        return self.o(out.transpose(1, 2).reshape(x.shape))


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        h = cfg.hidden
        self.norm1 = RMSNorm(h)
        self.attn = SelfAttention(cfg)
        self.norm_cross = RMSNorm(h)
        self.cross = CrossAttention(cfg)
        self.norm2 = RMSNorm(h)
        self.ffn_in = nn.Linear(h, cfg.ffn_mult * h)
        self.ffn_out = nn.Linear(cfg.ffn_mult * h, h)

    def forward(self, x, coords, text, text_mask, mod):
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = mod.chunk(6, dim=-1)
        x = x + gate_a * self.attn(modulate(self.norm1(x), shift_a, scale_a), coords)
        x = x + self.cross(self.norm_cross(x), text, text_mask)
        h = modulate(self.norm2(x), shift_f, scale_f)
        return x + gate_f * self.ffn_out(F.gelu(self.ffn_in(h)))


class DiT(nn.Module):
    def __init__(self, config: DiTConfig | None = None):
        super().__init__()
        self.config = cfg = config or DiTConfig()
        self.patch_in = nn.Linear(cfg.patch_dim, cfg.hidden)
        self.global_embed = GlobalEmbedder(cfg.hidden, cfg.depth, cfg.freq_dim)
        self.modulation = nn.Linear(cfg.hidden, 6 * cfg.hidden)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.depth))
        self.final_norm = RMSNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.patch_dim)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.modulation.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)

    def forward(self, tokens: torch.Tensor, coords: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor | None, timesteps: torch.Tensor, fps: torch.Tensor,
                taps: list | None = None) -> torch.Tensor:
        """Velocity prediction for raw patch tokens (B, N, 4*C_z) -> (B, N, 4*C_z).

        ``taps``, when given, collects the hidden state after the input
        projection and after every block.
        """
        cfg = self.config
        if tokens.ndim != 3 or tokens.shape[-1] != cfg.patch_dim:
            raise DimensionError(f"tokens must be (B, N, {cfg.patch_dim}), got {tuple(tokens.shape)}")
        b, n, _ = tokens.shape
        if coords.shape != (n, 3):
            raise DimensionError(f"coords {tuple(coords.shape)} do not match {n} tokens")
        if timesteps.shape != (b, n):
            raise DimensionError(f"timesteps must be per token (B, N), got {tuple(timesteps.shape)}")
        if text.ndim != 3 or text.shape[0] != b or text.shape[-1] != cfg.text_dim:
            raise DimensionError(f"text must be (B, L, {cfg.text_dim}), got {tuple(text.shape)}")
        fps = torch.as_tensor(fps, dtype=tokens.dtype).reshape(-1).expand(b)
        g, scales = self.global_embed(timesteps.to(tokens.dtype), fps)
        x = self.patch_in(tokens)
        if taps is not None:
            taps.append(x)
        for i, block in enumerate(self.blocks):
            mod = self.modulation(F.silu(g * scales[i]))
            x = block(x, coords, text, text_mask, mod)
            if taps is not None:
                taps.append(x)
        return self.head(self.final_norm(x))

    def velocity(self, latents: torch.Tensor, text, text_mask, timesteps, fps) -> torch.Tensor:
        """Grid-in, grid-out wrapper: (B, U, h, w, C) -> (B, U, h, w, C)."""
        grid = patchify(latents)
        out = self(grid.tokens, grid.coords, text, text_mask, timesteps, fps)
        return unpatchify(TokenGrid(out, grid.coords, grid.dims))

    def expansion_roles(self) -> dict[str, str]:
        """Role of every tensor under width expansion (see ``mugv.expansion``)."""
        roles = {}
        for name, _ in self.state_dict().items():
            roles[name] = _role_for(name)
        return roles


def _role_for(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    stem = name[: -len(leaf) - 1]
    if stem == "modulation":
        return "linear_chunked6" if leaf == "weight" else "bias_chunked6"
    if stem in ("patch_in", "global_embed.mlp.0") or stem.endswith(("cross.k", "cross.v")):
        return "linear_out" if leaf == "weight" else "bias_out"
    if stem == "head":
        return "linear_in" if leaf == "weight" else "bias_in"
    if stem.endswith(("q_norm", "k_norm")):
        return "head_gain"
    if name == "global_embed.block_scales":
        return "block_scale"
    if leaf == "weight" and (stem.endswith(("norm1", "norm2", "norm_cross")) or stem == "final_norm"):
        return "gain"
    if leaf == "weight":
        return "linear"
    if leaf == "bias":
        return "bias"
    return "unknown"


def expanded_config(cfg: DiTConfig, factor: int) -> DiTConfig:
    d = cfg.to_dict()
    d.update(hidden=cfg.hidden * factor, heads=cfg.heads * factor)
    return DiTConfig(**d)


def config_from_dict(d: dict) -> DiTConfig:
    d = dict(d)
    if "rope_split" in d:
        d["rope_split"] = tuple(d["rope_split"])
    return DiTConfig(**d)
