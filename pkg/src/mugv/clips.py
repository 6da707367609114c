"""Video clip container and the raw on-disk clip format.

A raw clip is a header-less ``<stem>.f32`` file of little-endian float32 values
in (T, C, H, W) order, next to a ``<stem>.json`` sidecar holding
``{"t", "c", "h", "w", "fps"}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InputError, NumericError


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, C, H, W)
    fps: float = 24.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise DimensionError(f"frames must be (T, C, H, W), got shape {self.frames.shape}")
        t, c, _, _ = self.frames.shape
        if t < 1:
            raise DimensionError("clip needs at least one frame")
        if c not in (1, 3):
            raise DimensionError(f"channel axis C must be 1 or 3, got {c}")
        if not self.fps > 0:
            raise InputError(f"fps must be positive, got {self.fps}")
        if not np.all(np.isfinite(self.frames)):
            raise NumericError("clip contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def segment(self, start: int, end: int) -> "VideoClip":
        return VideoClip(self.frames[start:end], self.fps)

    def pad_to_multiple(self, multiple: int = 8) -> "VideoClip":
        """Repeat the last frame until T is a multiple of ``multiple``."""
        t = self.num_frames
        extra = (-t) % multiple
        if not extra:
            return self
        tail = np.repeat(self.frames[-1:], extra, axis=0)
        return VideoClip(np.concatenate([self.frames, tail], axis=0), self.fps)


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".f32"), p.with_suffix(".json")


def write_clip(clip: VideoClip, path: str | Path) -> Path:
    data_path, meta_path = _paths(path)
    t, c, h, w = clip.shape
    data_path.write_bytes(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())
    meta = {"t": t, "c": c, "h": h, "w": w, "fps": float(clip.fps)}
    meta_path.write_text(json.dumps(meta, sort_keys=True))
    return data_path


def read_clip(path: str | Path) -> VideoClip:
    data_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    try:
        shape = tuple(int(meta[k]) for k in ("t", "c", "h", "w"))
        fps = float(meta["fps"])
    except KeyError as exc:
        raise InputError(f"{meta_path}: sidecar is missing key {exc}") from None
    raw = np.frombuffer(data_path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DimensionError(f"{data_path}: {raw.size} values do not match sidecar shape {shape}")
    return VideoClip(raw.reshape(shape).astype(np.float32), fps)


def list_clips(directory: str | Path) -> list[Path]:
    """Raw clips in a directory, sorted by file name."""
    return sorted(p for p in Path(directory).glob("*.f32") if p.with_suffix(".json").exists())


def moving_square(num_frames: int = 16, size: int = 32, channels: int = 3, square: int = 8,
                  velocity: tuple[int, int] = (1, 1), start: tuple[int, int] = (4, 4),
                  background: float = -0.6, color=(0.9, 0.2, -0.3)) -> np.ndarray:
    """Synthetic (T, C, H, W) clip of a colored square sliding over a soft gradient."""
    if not 0 < square < size:
        raise InputError(f"square side must lie in (0, {size}), got {square}")
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    frames = np.empty((num_frames, channels, size, size), dtype=np.float32)
    for t in range(num_frames):
        for c in range(channels):
            frames[t, c] = background + 0.2 * (xx * (c + 1) / channels) - 0.1 * yy
        y0 = (start[0] + velocity[0] * t) % (size - square)
        x0 = (start[1] + velocity[1] * t) % (size - square)
        for c in range(channels):
            frames[t, c, y0:y0 + square, x0:x0 + square] = color[c % len(color)]
    return frames
