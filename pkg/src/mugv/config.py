"""Strict JSON run configurations and model presets."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from .dit import PAPER_LARGE, DiTConfig
from .errors import ConfigurationError

PRECISIONS = {"single": torch.float32, "double": torch.float64}
PRESETS = {"desk": {}, "paper": PAPER_LARGE}


def strict_update(obj, values: dict, where: str):
    """Return a copy of dataclass ``obj`` with ``values`` applied; unknown keys are fatal."""
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    updates = {}
    for key, value in values.items():
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            updates[key] = strict_update(current, value, f"{where}.{key}")
        else:
            updates[key] = value
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass
class VaeRun:
    seed: int = 0
    precision: str = "single"
    steps: int = 400
    lr: float = 3e-3
    adaptive_after: int | None = 200
    gan_after: int | None = None
    target_psnr: float | None = None
    c_z: int = 24
    lambda_kl: float = 1e-6
    gamma_gan: float = 0.01
    rec_weights: tuple = (1.0, 1.0, 0.1)
    adaptive_floor: float = 0.1
    widths: tuple = (16, 24, 32)


@dataclass
class StageRun:
    resolution: int = 16
    clip_length: int = 8
    first_frame_mask_prob: float = 0.0


@dataclass
class CurriculumRun:
    boundaries: tuple = (200, 400)
    total_steps: int = 600
    stages: tuple = (
        {"resolution": 16, "clip_length": 8, "first_frame_mask_prob": 0.0},
        {"resolution": 16, "clip_length": 16, "first_frame_mask_prob": 0.3},
        {"resolution": 32, "clip_length": 16, "first_frame_mask_prob": 0.3},
    )
    image_ratio: tuple = (0.8, 0.1)


@dataclass
class DitRun:
    seed: int = 0
    precision: str = "single"
    preset: str = "desk"
    allow_paper_scale: bool = False
    model: dict = field(default_factory=dict)
    curriculum: CurriculumRun = field(default_factory=CurriculumRun)
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    save_every: int = 0


@dataclass
class PostRun:
    seed: int = 0
    precision: str = "single"
    steps: int = 20
    batch_size: int = 8
    rdpo_steps: int = 10
    merge_every: int = 5
    beta: float = 1.0
    alpha_sft: float = 1.0
    gamma_merge: float = 0.9
    kto_weights: tuple = (1.0, 1.0)
    plan: tuple = ("dpo", "kto")
    lr_start: float = 1e-4
    lr_end: float = 1e-6


def load_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return data


def load_run(cls, path: str | Path | None):
    """Parse a run config strictly; ``MUGV_SEED`` overrides the seed."""
    cfg = strict_update(cls(), load_json(path), Path(path).name if path else cls.__name__)
    env_seed = os.environ.get("MUGV_SEED")
    if env_seed is not None:
        try:
            cfg = dataclasses.replace(cfg, seed=int(env_seed))
        except ValueError:
            raise ConfigurationError(f"MUGV_SEED must be an integer, got {env_seed!r}") from None
    if getattr(cfg, "precision", "single") not in PRECISIONS:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
    return cfg


def dit_config_for(run: DitRun, allow_paper_scale: bool = False) -> DiTConfig:
    if run.preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {run.preset!r}; choose from {sorted(PRESETS)}")
    if run.preset == "paper" and not (run.allow_paper_scale or allow_paper_scale):
        raise ConfigurationError("preset 'paper' is for reference only; pass --allow-paper-scale to run it")
    base = DiTConfig(**PRESETS[run.preset])
    return strict_update(base, dict(run.model), "model")
