"""Post-training: checkpoint ensembling, annealed SFT, DPO / KTO and RDPO pairs.

Flow models expose regression errors rather than likelihoods, so the
implicit reward of a sample under ``theta`` is ``ref_error - theta_error``
evaluated at one shared (t, noise) draw.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ParameterSet
from .dit import DiT
from .errors import ConfigurationError, InputError, NumericError, SchedulingError
from .flowtrain import FlowBatch, VelocityFn, flow_objective, grad_norm, integrate, interpolate


def merge_weights(k: int, gamma: float) -> np.ndarray:
    """Normalized weights gamma**(K - i), i = 1..K; the newest checkpoint is last."""
    if k < 1:
        raise ConfigurationError("need at least one checkpoint")
    if not 0 < gamma <= 1:
        raise ConfigurationError("gamma must lie in (0, 1]")
    w = gamma ** np.arange(k - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


def merge_checkpoints(checkpoints: Sequence[ParameterSet], gamma: float = 0.9) -> ParameterSet:
    weights = merge_weights(len(checkpoints), gamma)
    first = checkpoints[0]
    for ckpt in checkpoints[1:]:
        if ckpt.names() != first.names():
            raise ConfigurationError("checkpoints hold different tensor names")
        for name in first:
            if ckpt[name].shape != first[name].shape:
                raise ConfigurationError(
                    f"tensor {name!r}: shape {ckpt[name].shape} vs {first[name].shape}")
    merged = ParameterSet(metadata=first.metadata)
    for name in first:
        acc = np.zeros(first[name].shape, dtype=np.float64)
        for w, ckpt in zip(weights, checkpoints):
            acc += w * ckpt[name].astype(np.float64)
        merged[name] = acc.astype(first[name].dtype)
    return merged


def anneal_lr(step: int, lr_start: float = 1e-4, lr_end: float = 1e-6, horizon: int = 1000) -> float:
    """Cosine decay from lr_start to lr_end over ``horizon`` steps, flat afterwards."""
    if step < 0:
        raise InputError("step must be nonnegative")
    frac = min(step, horizon) / horizon if horizon > 0 else 1.0
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * frac))


@dataclass
class PostTrainConfig:
    beta: float = 1.0
    alpha_sft: float = 1.0
    gamma_merge: float = 0.9
    kto_weights: tuple[float, float] = (1.0, 1.0)
    plan: tuple[str, ...] = ("dpo", "kto")
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    horizon: int = 100

    def __post_init__(self):
        self.kto_weights = tuple(float(w) for w in self.kto_weights)
        self.plan = tuple(self.plan)
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.alpha_sft < 0:
            raise ConfigurationError("alpha_sft must be nonnegative")
        if not 0 < self.gamma_merge <= 1:
            raise ConfigurationError("gamma_merge must lie in (0, 1]")
        if len(self.kto_weights) != 2 or min(self.kto_weights) <= 0:
            raise ConfigurationError("kto_weights must be two positive reals")
        if not self.plan:
            raise ConfigurationError("interleave plan must not be empty")


@dataclass
class Conditioning:
    text: torch.Tensor  # (L, text_dim)
    fps: float = 24.0


@dataclass
class PreferencePair:
    winner: torch.Tensor  # (U, h, w, C)
    loser: torch.Tensor
    conditioning: Conditioning
    source: str = "human_pairwise"


@dataclass
class LabeledSample:
    latents: torch.Tensor
    conditioning: Conditioning
    desirable: bool
    source: str = "human_label"


def collate_conditioning(conds: Sequence[Conditioning]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    length = max(c.text.shape[0] for c in conds)
    dim = conds[0].text.shape[-1]
    text = conds[0].text.new_zeros(len(conds), length, dim)
    mask = torch.zeros(len(conds), length, dtype=torch.bool)
    for i, c in enumerate(conds):
        text[i, : c.text.shape[0]] = c.text
        mask[i, : c.text.shape[0]] = True
    fps = torch.tensor([c.fps for c in conds], dtype=text.dtype)
    return text, mask, fps


def flow_errors(model: DiT, latents: torch.Tensor, text, text_mask, fps, t: torch.Tensor,
                noise: torch.Tensor) -> torch.Tensor:
    """Per-sample flow regression error (B,) at the given draws."""
    x_t, target = interpolate(latents, noise, t)
    b, u, h, w, _ = latents.shape
    tt = t[:, None].expand(b, u * (h // 2) * (w // 2)).to(latents.dtype)
    pred = model.velocity(x_t, text, text_mask, tt, fps)
    return (pred - target).pow(2).flatten(1).mean(dim=1)


def dpo_from_errors(err_w, err_l, ref_w, ref_l, beta: float) -> torch.Tensor:
    margin = (ref_w - err_w) - (ref_l - err_l)
    return -F.logsigmoid(beta * margin).mean()


def kto_from_errors(err, ref_err, desirable, beta: float, weights=(1.0, 1.0),
                    baseline: torch.Tensor | float | None = None) -> torch.Tensor:
    """KTO with a detached batch-mean baseline (override with ``baseline``)."""
    err = torch.as_tensor(err)
    if err.numel() == 0:
        raise InputError("KTO needs at least one sample")
    reward = beta * (torch.as_tensor(ref_err, dtype=err.dtype) - err)
    z0 = reward.mean().detach() if baseline is None else torch.as_tensor(baseline, dtype=err.dtype)
    desirable = torch.as_tensor(desirable, dtype=torch.bool)
    w_d, w_u = weights
    terms = torch.where(desirable, w_d * (1 - torch.sigmoid(reward - z0)),
                        w_u * (1 - torch.sigmoid(z0 - reward)))
    return terms.mean()


def _shared_draws(shape, dtype, generator):
    t = torch.rand(shape[0], generator=generator, dtype=dtype)
    noise = torch.randn(shape, generator=generator, dtype=dtype)
    return t, noise


def dpo_loss(model: DiT, ref: DiT, pairs: Sequence[PreferencePair], beta: float,
             generator: torch.Generator) -> torch.Tensor:
    if not pairs:
        raise InputError("DPO needs a nonempty batch of pairs")
    win = torch.stack([p.winner for p in pairs])
    lose = torch.stack([p.loser for p in pairs])
    text, mask, fps = collate_conditioning([p.conditioning for p in pairs])
    t, noise = _shared_draws(win.shape, win.dtype, generator)
    e_w = flow_errors(model, win, text, mask, fps, t, noise)
    e_l = flow_errors(model, lose, text, mask, fps, t, noise)
    with torch.no_grad():
        r_w = flow_errors(ref, win, text, mask, fps, t, noise)
        r_l = flow_errors(ref, lose, text, mask, fps, t, noise)
    return dpo_from_errors(e_w, e_l, r_w, r_l, beta)


def kto_loss(model: DiT, ref: DiT, samples: Sequence[LabeledSample], config: PostTrainConfig,
             generator: torch.Generator, baseline: torch.Tensor | float | None = None) -> torch.Tensor:
    """KTO on flow errors; ``baseline`` pins z0 instead of the detached batch mean."""
    if not samples:
        raise InputError("KTO needs a nonempty batch of labeled samples")
    x = torch.stack([s.latents for s in samples])
    text, mask, fps = collate_conditioning([s.conditioning for s in samples])
    t, noise = _shared_draws(x.shape, x.dtype, generator)
    err = flow_errors(model, x, text, mask, fps, t, noise)
    with torch.no_grad():
        ref_err = flow_errors(ref, x, text, mask, fps, t, noise)
    desirable = torch.tensor([s.desirable for s in samples])
    return kto_from_errors(err, ref_err, desirable, config.beta, config.kto_weights, baseline)


def rdpo_pairs(real: torch.Tensor, velocity: VelocityFn, steps: int, seed: int,
               conditioning: Sequence[Conditioning] | None = None) -> list[PreferencePair]:
    """Build preference pairs from real latents without annotation.

    The winner is regenerated from the noise that reverse integration assigns
    to the real sample; the loser comes from fresh noise under the same
    conditioning and integrator settings.
    """
    if steps < 1:
        raise InputError("steps must be ≥ 1")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        noise_hat = integrate(velocity, real, 0.0, 1.0, steps)
        winners = integrate(velocity, noise_hat, 1.0, 0.0, steps)
        fresh = torch.randn(real.shape, generator=gen, dtype=real.dtype)
        losers = integrate(velocity, fresh, 1.0, 0.0, steps)
    if conditioning is None:
        conditioning = [Conditioning(real.new_zeros(1, 1)) for _ in range(real.shape[0])]
    return [PreferencePair(w, l, c, "rdpo") for w, l, c in zip(winners, losers, conditioning)]


@dataclass
class PreferenceBatch:
    kind: str  # "dpo" or "kto"
    items: list
    source: str = ""

    def matches(self, tag: str) -> bool:
        return tag in (self.kind, self.source)


class InterleavePlan:
    """Cycles through the plan's tags; each incoming batch must match the current tag."""

    def __init__(self, tags: Sequence[str]):
        self.tags = tuple(tags)
        self.position = 0
        self.accepted: list[str] = []

    @property
    def expected(self) -> str:
        return self.tags[self.position % len(self.tags)]

    def accept(self, batch: PreferenceBatch) -> None:
        if not batch.matches(self.expected):
            raise SchedulingError(
                f"batch {batch.kind}/{batch.source or '-'} arrived where the plan expects {self.expected!r}")
        self.accepted.append(self.expected)
        self.position += 1


@dataclass
class PostTrainState:
    model: DiT
    ref: DiT
    optimizer: torch.optim.Optimizer
    plan: InterleavePlan
    generator: torch.Generator
    step: int = 0

    @classmethod
    def create(cls, model: DiT, config: PostTrainConfig, seed: int = 0,
               ref: DiT | None = None) -> "PostTrainState":
        ref = ref if ref is not None else copy.deepcopy(model)
        for p in ref.parameters():
            p.requires_grad_(False)
        ref.eval()
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr_start, weight_decay=0.0)
        return cls(model, ref, opt, InterleavePlan(config.plan), torch.Generator().manual_seed(seed))


def post_train_loss(state: PostTrainState, batch: PreferenceBatch, sft_batch: FlowBatch | None,
                    config: PostTrainConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    if batch.kind == "dpo":
        pref = dpo_loss(state.model, state.ref, batch.items, config.beta, state.generator)
    elif batch.kind == "kto":
        pref = kto_loss(state.model, state.ref, batch.items, config, state.generator)
    else:
        raise SchedulingError(f"unknown preference batch kind {batch.kind!r}")
    if sft_batch is not None and config.alpha_sft:
        sft = flow_objective(state.model, sft_batch)
        total = pref + config.alpha_sft * sft
    else:
        sft = pref.new_zeros(())
        total = pref
    return total, {"pref": pref, "sft": sft}


def post_train_step(state: PostTrainState, batch: PreferenceBatch, sft_batch: FlowBatch | None,
                    config: PostTrainConfig) -> tuple[PostTrainState, dict]:
    state.plan.accept(batch)
    lr = anneal_lr(state.step, config.lr_start, config.lr_end, config.horizon)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    total, parts = post_train_loss(state, batch, sft_batch, config)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite post-training loss at step {state.step}")
    state.optimizer.zero_grad()
    total.backward()
    gnorm = grad_norm(state.model.parameters())
    state.optimizer.step()
    state.step += 1
    metrics = {"step": state.step - 1, "tag": batch.kind, "loss": float(total.detach()),
               "pref": float(parts["pref"].detach()), "sft": float(parts["sft"].detach()),
               "grad_norm": gnorm, "lr": lr}
    return state, metrics
