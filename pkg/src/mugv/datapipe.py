"""Deterministic clip curation: scene cuts, quality gates, dedup and tag balancing.

Gate order is fixed: sharpness -> aesthetic -> motion -> mllm.  The first
failing gate names the rejection reason.  Learned scorers (aesthetic
predictor, multimodal filter) are pluggable callables; the stubs here only
exist so the thresholds stay testable offline.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .clips import VideoClip, list_clips, read_clip
from .errors import ConfigurationError, InputError, PipelineError

Scorer = Callable[[np.ndarray], float]

HIST_BINS = 16
BLOCK = 8
SEARCH = 4
HASH_SIDE = 8
DUP_HAMMING = 12


@dataclass
class FilterThresholds:
    sharpness: tuple[float, float] = (200.0, 2000.0)
    motion: tuple[float, float] = (1.0, 20.0)
    aesthetic_min: float = 4.5
    mllm_min: float = 0.5
    scene_cut: float = 1.0

    def __post_init__(self):
        self.sharpness = tuple(float(v) for v in self.sharpness)
        self.motion = tuple(float(v) for v in self.motion)
        for name in ("sharpness", "motion"):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigurationError(f"{name} thresholds need low < high, got ({low}, {high})")

    @classmethod
    def from_dict(cls, d: dict) -> "FilterThresholds":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipRecord:
    clip_id: str
    source_id: str
    start: int
    end: int
    scores: dict[str, float] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)
    status: str = "pending"
    reasons: list[str] = field(default_factory=list)
    weight: float | None = None

    def __post_init__(self):
        if self.end <= self.start:
            raise InputError(f"{self.clip_id}: frame range end must exceed start")

    def reject(self, reason: str) -> "ClipRecord":
        self.status = "rejected"
        self.reasons.append(reason)
        return self

    def to_dict(self) -> dict:
        d = {"clip_id": self.clip_id, "source_id": self.source_id,
             "frame_range": [self.start, self.end], "scores": dict(sorted(self.scores.items())),
             "tags": list(self.tags), "status": self.status, "reasons": list(self.reasons)}
        if self.weight is not None:
            d["weight"] = self.weight
        return d


def to_gray(frames: np.ndarray) -> np.ndarray:
    """Mean over the channel axis of (..., C, H, W)."""
    return np.asarray(frames, dtype=np.float64).mean(axis=-3)


def to_intensity(frames: np.ndarray) -> np.ndarray:
    """Map [-1, 1] values to the 8-bit intensity scale the thresholds are quoted in."""
    return (np.asarray(frames, dtype=np.float64) + 1.0) * 127.5


def channel_histograms(frame: np.ndarray) -> np.ndarray:
    """Three 16-bin histograms over [-1, 1], each normalised to unit mass."""
    frame = np.asarray(frame)
    if frame.shape[0] == 1:
        frame = np.repeat(frame, 3, axis=0)
    n = frame[0].size
    return np.stack([np.histogram(np.clip(frame[c], -1, 1), bins=HIST_BINS, range=(-1, 1))[0] / n
                     for c in range(3)])


def detect_scenes(frames: np.ndarray, threshold: float = 1.0) -> list[int]:
    """Frame indices t where the L1 histogram distance between t-1 and t exceeds ``threshold``."""
    frames = frames.frames if isinstance(frames, VideoClip) else np.asarray(frames)
    if frames.shape[0] < 2:
        return []
    hists = [channel_histograms(f) for f in frames]
    return [t for t in range(1, len(hists)) if np.abs(hists[t] - hists[t - 1]).sum() > threshold]


def laplacian_np(image: np.ndarray) -> np.ndarray:
    """5-point Laplacian with mirror (reflect-101) borders."""
    p = np.pad(np.asarray(image, dtype=np.float64), 1, mode="reflect")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * p[1:-1, 1:-1]


def sharpness_score(frame: np.ndarray) -> float:
    """Variance of the Laplacian of a (C, H, W) or (H, W) frame, on its own value scale."""
    frame = np.asarray(frame, dtype=np.float64)
    gray = frame if frame.ndim == 2 else to_gray(frame)
    return float(laplacian_np(gray).var())


def sample_indices(num_frames: int) -> list[int]:
    """Start frames of the (start, middle, end) pairs."""
    return [0, (num_frames - 1) // 2, num_frames - 2]


def block_displacements(a: np.ndarray, b: np.ndarray, block: int = BLOCK, radius: int = SEARCH) -> np.ndarray:
    """Exhaustive SAD block matching of 2D image ``a`` into ``b``.

    Only blocks whose full search window lies inside the frame are scored.
    Ties go to the smallest displacement.  Returns (n_blocks, 2) (dy, dx).
    """
    h, w = a.shape
    ys = [y for y in range(0, h - block + 1, block) if y - radius >= 0 and y + block + radius <= h]
    xs = [x for x in range(0, w - block + 1, block) if x - radius >= 0 and x + block + radius <= w]
    if not ys or not xs:
        raise InputError(f"frame {h}x{w} too small for {block}px blocks with ±{radius}px search")
    blocks = np.stack([a[y:y + block, x:x + block] for y in ys for x in xs])
    offsets = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                     key=lambda d: (d[0] ** 2 + d[1] ** 2, d))
    best = np.full(len(blocks), np.inf)
    best_d = np.zeros((len(blocks), 2))
    for dy, dx in offsets:
        cand = np.stack([b[y + dy:y + dy + block, x + dx:x + dx + block] for y in ys for x in xs])
        sad = np.abs(cand - blocks).sum(axis=(1, 2))
        better = sad < best
        best[better] = sad[better]
        best_d[better] = (dy, dx)
    return best_d


def motion_amplitude(frames: np.ndarray) -> float:
    """Mean block displacement magnitude (pixels) over three evenly spaced frame pairs."""
    frames = frames.frames if isinstance(frames, VideoClip) else np.asarray(frames)
    if frames.shape[0] < 6:
        raise InputError(f"motion needs at least 6 frames, got {frames.shape[0]}")
    gray = to_gray(frames)
    mags = []
    for i in sample_indices(len(gray)):
        d = block_displacements(gray[i], gray[i + 1])
        mags.append(np.hypot(d[:, 0], d[:, 1]))
    return float(np.concatenate(mags).mean())


def stub_aesthetic(frames: np.ndarray) -> float:
    """Offline stand-in for a learned aesthetic predictor: contrast mapped onto a 0-10 scale."""
    return float(np.clip(10.0 * np.asarray(frames).std(), 0.0, 10.0))


def stub_mllm(frames: np.ndarray) -> float:
    """Offline stand-in for the multimodal quality filter; passes every clip."""
    return 1.0


@dataclass
class Scorers:
    aesthetic: Scorer | None = None
    mllm: Scorer | None = None


def compute_scores(frames: np.ndarray) -> dict[str, float]:
    """Sharpness (8-bit scale, mean over the three sampled frames) and motion."""
    intensity = to_intensity(frames)
    sharp = [sharpness_score(intensity[i]) for i in sample_indices(len(frames))]
    return {"sharpness": float(np.mean(sharp)), "motion": motion_amplitude(frames)}


def filter_clip(record: ClipRecord, thresholds: FilterThresholds | None = None,
                scorers: Scorers | None = None, frames: np.ndarray | None = None) -> ClipRecord:
    thresholds = thresholds or FilterThresholds()
    scorers = scorers or Scorers()
    scores = record.scores
    if ("sharpness" not in scores or "motion" not in scores) and frames is not None:
        for key, value in compute_scores(frames).items():
            scores.setdefault(key, value)
    for key in ("sharpness", "motion"):
        if key not in scores:
            raise PipelineError(f"{record.clip_id}: mandatory score {key!r} missing and no frames given")
    if scorers.aesthetic is not None and "aesthetic" not in scores:
        if frames is None:
            raise PipelineError(f"{record.clip_id}: aesthetic scorer needs frames")
        scores["aesthetic"] = float(scorers.aesthetic(frames))
    if scorers.mllm is not None and "mllm" not in scores:
        if frames is None:
            raise PipelineError(f"{record.clip_id}: mllm scorer needs frames")
        scores["mllm"] = float(scorers.mllm(frames))

    low, high = thresholds.sharpness
    if not low <= scores["sharpness"] <= high:
        return record.reject("sharpness")
    if "aesthetic" in scores and scores["aesthetic"] < thresholds.aesthetic_min:
        return record.reject("aesthetic")
    low, high = thresholds.motion
    if scores["motion"] < low:
        return record.reject("static")
    if scores["motion"] > high:
        return record.reject("dynamic")
    if "mllm" in scores and scores["mllm"] < thresholds.mllm_min:
        return record.reject("mllm")
    record.status = "kept"
    return record


def average_hash(frame: np.ndarray) -> np.ndarray:
    """64-bit mean-threshold hash of a (C, H, W) frame, as a bool vector."""
    gray = to_gray(frame)
    rows = np.array_split(np.arange(gray.shape[0]), HASH_SIDE)
    cols = np.array_split(np.arange(gray.shape[1]), HASH_SIDE)
    small = np.array([[gray[np.ix_(r, c)].mean() for c in cols] for r in rows])
    return (small > small.mean()).ravel()


def clip_hash(frames: np.ndarray) -> np.ndarray:
    t = len(frames)
    return np.concatenate([average_hash(frames[i]) for i in (0, (t - 1) // 2, t - 1)])


def dedup(records: Sequence[ClipRecord], frames_of: Callable[[ClipRecord], np.ndarray],
          max_distance: int = DUP_HAMMING) -> list[ClipRecord]:
    """Drop records whose hash lies within ``max_distance`` bits of an earlier survivor."""
    kept: list[tuple[ClipRecord, np.ndarray]] = []
    for rec in records:
        h = clip_hash(frames_of(rec))
        if any(int(np.count_nonzero(h != other)) <= max_distance for _, other in kept):
            continue
        kept.append((rec, h))
    return [r for r, _ in kept]


def balance_tags(records: Sequence[ClipRecord], target: dict[str, float]) -> np.ndarray:
    """Sampling weight per record, proportional to sum over its tags of target(tag)/count(tag)."""
    if not target:
        raise ConfigurationError("target distribution is empty")
    if any(v < 0 for v in target.values()) or sum(target.values()) <= 0:
        raise ConfigurationError("target weights must be nonnegative with a positive sum")
    counts: dict[str, int] = {}
    for rec in records:
        if not rec.tags:
            raise ConfigurationError(f"{rec.clip_id}: record has no tags")
        for tag in rec.tags:
            if tag not in target:
                raise ConfigurationError(f"{rec.clip_id}: tag {tag!r} is not in the target distribution")
            counts[tag] = counts.get(tag, 0) + 1
    missing = sorted(set(target) - set(counts))
    if missing:
        warnings.warn(f"target references tags absent from the corpus: {missing}", stacklevel=2)
    norm = sum(target[t] for t in counts)
    weights = np.array([sum(target[t] / norm / counts[t] for t in rec.tags) for rec in records])
    total = weights.sum()
    return weights / total if total > 0 else weights


def run_pipeline(in_dir: str | Path, thresholds: FilterThresholds | None = None,
                 scorers: Scorers | None = None, tags: dict[str, list[str]] | None = None,
                 target: dict[str, float] | None = None) -> list[ClipRecord]:
    """Split, score, filter, dedup and weight every clip found in ``in_dir``."""
    thresholds = thresholds or FilterThresholds()
    tags = tags or {}
    records: list[ClipRecord] = []
    frames_by_id: dict[str, np.ndarray] = {}
    for path in list_clips(in_dir):
        clip = read_clip(path)
        source = path.stem
        bounds = [0, *detect_scenes(clip.frames, thresholds.scene_cut), clip.num_frames]
        for i, (start, end) in enumerate(zip(bounds, bounds[1:])):
            rec = ClipRecord(f"{source}#{i:03d}", source, start, end, tags=list(tags.get(source, ["untagged"])))
            seg = clip.frames[start:end]
            frames_by_id[rec.clip_id] = seg
            if end - start < 6:
                rec.reject("too_short")
            else:
                filter_clip(rec, thresholds, scorers, seg)
            records.append(rec)

    kept = [r for r in records if r.status == "kept"]
    survivors = {r.clip_id for r in dedup(kept, lambda r: frames_by_id[r.clip_id])}
    for rec in kept:
        if rec.clip_id not in survivors:
            rec.status = "pending"
            rec.reject("duplicate")
    kept = [r for r in records if r.status == "kept"]
    if target and kept:
        for rec, w in zip(kept, balance_tags(kept, target)):
            rec.weight = float(w)
    return records


def manifest_lines(records: Iterable[ClipRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def write_manifest(records: Iterable[ClipRecord], path: str | Path) -> None:
    Path(path).write_text(manifest_lines(records))
