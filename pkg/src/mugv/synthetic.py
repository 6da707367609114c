"""Seeded synthetic corpora for desk-scale training: moving squares in latent space."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .dit import DiTConfig, TextEncoder, patchify, tokenize

DIRECTIONS = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0), "still": (0, 0)}


@dataclass
class LatentBatch:
    latents: torch.Tensor  # (B, U, h, w, C)
    prompts: list[str]
    fps: torch.Tensor  # (B,)


def moving_square_latents(batch: int, units: int, size: int, c_z: int, generator: torch.Generator,
                          images: torch.Tensor | None = None, square: int = 4) -> LatentBatch:
    """Squares of a per-sample latent colour drifting one cell per unit.

    ``images`` marks samples that are stills (zero velocity, prompt "still").
    """
    lat = torch.zeros(batch, units, size, size, c_z)
    names = list(DIRECTIONS)[:4]
    prompts = []
    span = max(1, size - square + 1)
    for b in range(batch):
        still = bool(images[b]) if images is not None else False
        name = "still" if still else names[int(torch.randint(4, (1,), generator=generator))]
        dy, dx = DIRECTIONS[name]
        y0 = int(torch.randint(span, (1,), generator=generator))
        x0 = int(torch.randint(span, (1,), generator=generator))
        colour = torch.randn(c_z, generator=generator)
        for u in range(units):
            y = min(max(y0 + dy * u, 0), size - square)
            x = min(max(x0 + dx * u, 0), size - square)
            lat[b, u, y:y + square, x:x + square] = colour
        prompts.append(f"a square moving {name}" if not still else "a still square")
    fps = torch.full((batch,), 24.0)
    return LatentBatch(lat, prompts, fps)


def embed_prompts(prompts: list[str], encoder: TextEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        return encoder.batch([tokenize(p, encoder.vocab) for p in prompts])


def random_forward_inputs(config: DiTConfig, batch: int, generator: torch.Generator, units: int = 2,
                          size: int = 8, text_len: int = 5, dtype=torch.float32) -> tuple:
    """Random (tokens, coords, text, text_mask, timesteps, fps) for a direct DiT forward."""
    latents = torch.randn(batch, units, size, size, config.c_z, generator=generator, dtype=dtype)
    grid = patchify(latents)
    text = torch.randn(batch, text_len, config.text_dim, generator=generator, dtype=dtype)
    mask = torch.ones(batch, text_len, dtype=torch.bool)
    timesteps = torch.rand(batch, grid.tokens.shape[1], generator=generator, dtype=dtype)
    fps = torch.full((batch,), 24.0, dtype=dtype)
    return grid.tokens, grid.coords, text, mask, timesteps, fps
