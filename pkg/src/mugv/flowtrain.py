"""Flow-matching objective, masked frame conditioning, Euler sampling, curriculum.

Convention: data sits at t=0, noise at t=1, ``x_t = (1 - t) x + t n`` and
the regression target is the constant velocity ``n - x``.  Sampling
integrates from t=1 down to t=0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import torch

from .dit import DiT, patchify, unpatchify, TokenGrid
from .errors import ConfigurationError, DimensionError, InputError, NumericError

# velocity(x, t_per_token) -> v, both (B, U, h, w, C); t_per_token is (B, N)
VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def interpolate(x_data: torch.Tensor, noise: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight path between data and noise; ``t`` broadcasts from the left."""
    if x_data.shape != noise.shape:
        raise DimensionError(f"data {tuple(x_data.shape)} vs noise {tuple(noise.shape)}")
    t = torch.as_tensor(t, dtype=x_data.dtype)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise InputError("t must lie in [0, 1]")
    t = t.reshape(t.shape + (1,) * (x_data.ndim - t.ndim))
    return (1 - t) * x_data + t * noise, noise - x_data


def flow_loss(pred_v: torch.Tensor, v_target: torch.Tensor, loss_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over the tokens selected by ``loss_mask``.

    ``loss_mask`` has the leading (token) shape of the predictions; each
    selected token contributes all of its trailing elements.
    """
    if pred_v.shape != v_target.shape:
        raise DimensionError(f"prediction {tuple(pred_v.shape)} vs target {tuple(v_target.shape)}")
    sq = (pred_v - v_target).pow(2)
    if loss_mask is None:
        return sq.mean()
    mask = loss_mask.to(sq.dtype)
    mask = mask.reshape(mask.shape + (1,) * (sq.ndim - mask.ndim)).expand_as(sq)
    count = mask.sum()
    if count == 0:
        return (sq * mask).sum()
    return (sq * mask).sum() / count


@dataclass
class ConditionMask:
    """Token-level conditioning.

    ``conditioned`` is (B, N) boolean over patch tokens; ``condition_latents``
    holds clean raw patch tokens (B, N, D), only read where conditioned.
    """

    conditioned: torch.Tensor
    condition_latents: torch.Tensor | None = None

    @classmethod
    def empty(cls, batch: int, num_tokens: int) -> "ConditionMask":
        return cls(torch.zeros(batch, num_tokens, dtype=torch.bool))

    @classmethod
    def first_units(cls, latents: torch.Tensor, units: int = 1,
                    which: torch.Tensor | None = None) -> "ConditionMask":
        """Condition on the first ``units`` latent units of a (B, U, h, w, C) grid."""
        grid = patchify(latents)
        cond = (grid.coords[:, 0] < units)[None].expand(latents.shape[0], -1).clone()
        if which is not None:
            cond &= which[:, None]
        return cls(cond, grid.tokens)


def apply_condition_mask(x_t: torch.Tensor, timesteps: torch.Tensor, mask: ConditionMask
                         ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Replace conditioned tokens by clean latents at timestep zero.

    Returns (model input tokens, per-token timesteps, loss mask).
    """
    cond = mask.conditioned
    if cond.shape != x_t.shape[:-1] or cond.shape != timesteps.shape:
        raise DimensionError(
            f"mask {tuple(cond.shape)} does not align with tokens {tuple(x_t.shape[:-1])}")
    if cond.any():
        if mask.condition_latents is None:
            raise InputError("conditioned tokens present but condition_latents missing")
        if mask.condition_latents.shape != x_t.shape:
            raise DimensionError("condition_latents must match the token tensor shape")
        x_t = torch.where(cond[..., None], mask.condition_latents.to(x_t.dtype), x_t)
        timesteps = torch.where(cond, torch.zeros_like(timesteps), timesteps)
    return x_t, timesteps, ~cond


def dit_velocity(model: DiT, text: torch.Tensor, text_mask: torch.Tensor | None, fps) -> VelocityFn:
    def velocity(x: torch.Tensor, t_tokens: torch.Tensor) -> torch.Tensor:
        return model.velocity(x, text, text_mask, t_tokens, fps)
    return velocity


def _reimpose(x: torch.Tensor, mask: ConditionMask | None) -> torch.Tensor:
    if mask is None or not mask.conditioned.any():
        return x
    grid = patchify(x)
    tokens = torch.where(mask.conditioned[..., None], mask.condition_latents.to(x.dtype), grid.tokens)
    return unpatchify(TokenGrid(tokens, grid.coords, grid.dims))


def _token_times(x: torch.Tensor, t: float, mask: ConditionMask | None) -> torch.Tensor:
    b, u, h, w, _ = x.shape
    tt = torch.full((b, u * (h // 2) * (w // 2)), t, dtype=x.dtype)
    if mask is not None:
        tt = torch.where(mask.conditioned, torch.zeros_like(tt), tt)
    return tt


def integrate(velocity: VelocityFn, x: torch.Tensor, t_start: float, t_end: float, steps: int,
              mask: ConditionMask | None = None) -> torch.Tensor:
    """Explicit Euler from ``t_start`` to ``t_end`` (either direction)."""
    if steps < 1:
        raise InputError("steps must be ≥ 1")
    dt = (t_end - t_start) / steps
    x = _reimpose(x, mask)
    for i in range(steps):
        t = t_start + i * dt
        x = x + dt * velocity(x, _token_times(x, t, mask))
        x = _reimpose(x, mask)
    return x


def sample(velocity: VelocityFn, shape: tuple[int, ...], mask: ConditionMask | None = None,
           steps: int = 20, seed: int = 0, dtype=torch.float32, noise: torch.Tensor | None = None
           ) -> torch.Tensor:
    """Integrate the learned ODE from standard normal noise at t=1 to t=0."""
    if steps < 1:
        raise InputError("steps must be ≥ 1")
    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(shape, generator=gen, dtype=dtype)
    with torch.no_grad():
        return integrate(velocity, noise, 1.0, 0.0, steps, mask)


def reverse_sample(velocity: VelocityFn, x_data: torch.Tensor, steps: int = 20,
                   mask: ConditionMask | None = None) -> torch.Tensor:
    """Integrate from data at t=0 back to the noise it came from at t=1."""
    with torch.no_grad():
        return integrate(velocity, x_data, 0.0, 1.0, steps, mask)


@dataclass
class StageSpec:
    resolution: int
    clip_length: int
    first_frame_mask_prob: float


@dataclass
class CurriculumConfig:
    """Three stages; boundaries are the (exclusive) last steps of stages 1 and 2."""

    boundaries: tuple[int, int] = (200, 400)
    total_steps: int = 600
    stages: tuple[StageSpec, StageSpec, StageSpec] = (
        StageSpec(16, 8, 0.0), StageSpec(16, 16, 0.3), StageSpec(32, 16, 0.3))
    image_ratio: tuple[float, float] = (0.8, 0.1)

    def __post_init__(self):
        self.stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        b1, b2 = self.boundaries
        if not 0 < b1 <= b2 <= self.total_steps:
            raise ConfigurationError("need 0 < boundary1 <= boundary2 <= total_steps")
        if len(self.stages) != 3:
            raise ConfigurationError("curriculum has exactly three stages")
        start, end = self.image_ratio
        if not 0 <= end <= start <= 1:
            raise ConfigurationError("image_ratio must anneal downward within [0, 1]")
        s1, s2, s3 = self.stages
        if s1.first_frame_mask_prob != 0 or min(s2.first_frame_mask_prob, s3.first_frame_mask_prob) <= 0:
            raise ConfigurationError("first-frame masking is off in stage 1 and on in stages 2-3")
        for a, b in ((s1, s2), (s2, s3)):
            if b.resolution < a.resolution or b.clip_length < a.clip_length:
                raise ConfigurationError("resolution and clip length must not shrink across stages")


class StageDescriptor(NamedTuple):
    stage: int
    resolution: int
    clip_length: int
    image_ratio: float
    first_frame_mask_prob: float


def curriculum_schedule(step: int, config: CurriculumConfig) -> StageDescriptor:
    if step < 0:
        raise InputError("step must be nonnegative")
    b1, b2 = config.boundaries
    start, end = config.image_ratio
    if step < b1:
        idx, ratio = 0, start + (end - start) * step / b1
    elif step < b2:
        idx, ratio = 1, end
    else:
        idx, ratio = 2, end
    s = config.stages[idx]
    return StageDescriptor(idx + 1, s.resolution, s.clip_length, ratio, s.first_frame_mask_prob)


@dataclass
class FlowBatch:
    latents: torch.Tensor  # (B, U, h, w, C)
    text: torch.Tensor  # (B, L, text_dim)
    text_mask: torch.Tensor | None
    t: torch.Tensor  # (B,)
    noise: torch.Tensor
    fps: torch.Tensor  # (B,)

    @classmethod
    def draw(cls, latents, text, text_mask, fps, generator: torch.Generator) -> "FlowBatch":
        b = latents.shape[0]
        t = torch.rand(b, generator=generator, dtype=latents.dtype)
        noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
        fps = torch.as_tensor(fps, dtype=latents.dtype).reshape(-1).expand(b).clone()
        return cls(latents, text, text_mask, t, noise, fps)


def flow_objective(model: DiT, batch: FlowBatch, mask: ConditionMask | None = None) -> torch.Tensor:
    """Masked flow-matching loss of ``model`` on one batch."""
    grid = patchify(batch.latents)
    noise_tokens = patchify(batch.noise).tokens
    x_t, v_target = interpolate(grid.tokens, noise_tokens, batch.t)
    b, n, _ = x_t.shape
    timesteps = batch.t[:, None].expand(b, n)
    if mask is None:
        mask = ConditionMask.empty(b, n)
    x_in, timesteps, loss_mask = apply_condition_mask(x_t, timesteps, mask)
    pred = model(x_in, grid.coords, batch.text, batch.text_mask, timesteps, batch.fps)
    return flow_loss(pred, v_target, loss_mask)


@dataclass
class TrainState:
    model: DiT
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0

    @classmethod
    def create(cls, model: DiT, lr: float = 1e-3, weight_decay: float = 0.0, seed: int = 0) -> "TrainState":
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
        return cls(model, opt, torch.Generator().manual_seed(seed))


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train_step(state: TrainState, batch: FlowBatch, first_frame_mask_prob: float = 0.0,
               lr: float | None = None) -> tuple[TrainState, dict]:
    """One AdamW update on the masked flow objective.

    Each sample is independently first-unit conditioned with probability
    ``first_frame_mask_prob``; the draw comes from the state's generator.
    """
    if lr is not None:
        for g in state.optimizer.param_groups:
            g["lr"] = lr
    b = batch.latents.shape[0]
    mask = None
    if first_frame_mask_prob > 0:
        which = torch.rand(b, generator=state.generator) < first_frame_mask_prob
        mask = ConditionMask.first_units(batch.latents, 1, which)
    state.model.train()
    loss = flow_objective(state.model, batch, mask)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite flow loss at step {state.step}: {float(loss.detach())}")
    state.optimizer.zero_grad()
    loss.backward()
    gnorm = grad_norm(state.model.parameters())
    state.optimizer.step()
    state.step += 1
    metrics = {"loss": float(loss.detach()), "grad_norm": gnorm,
               "lr": state.optimizer.param_groups[0]["lr"]}
    return state, metrics
