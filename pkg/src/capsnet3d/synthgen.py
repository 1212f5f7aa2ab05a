"""Procedural generator for the synthetic motion-video dataset.

Each sample is a T-frame clip of one moving shape on a black background.
The motion class (linear, circular, turn, random) is the label; shape kind,
size, color, speed/acceleration, direction, noise, rotation, and zoom all
vary per sample. Masks are the exact pre-noise rasterized support.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .errors import GenerationError, UsageError

MOTION_CLASSES = ("linear", "circular", "turn", "random")
SHAPES = ("circle", "square", "triangle")

_REJECTION_BUDGET = 1000


@dataclass
class ParamRanges:
    """Uniform sampling ranges for the varying video properties."""

    size: tuple = (2.0, 6.0)  # circumradius, px
    speed: tuple = (0.5, 2.5)  # px/frame
    noise: tuple = (0.0, 0.2)  # additive uniform amplitude
    zoom_rate: tuple = (0.97, 1.03)  # scale factor per frame
    rotation_rate: tuple = (0.0, 0.2)  # radians per frame
    color: tuple = (0.25, 1.0)  # per-channel fill intensity
    turn_angle: tuple = (math.pi / 3, 2 * math.pi / 3)  # 60..120 degrees
    sweep_angle: tuple = (1.0, 2.5)  # total circular arc, radians
    accelerate_prob: float = 0.5

    @classmethod
    def for_extents(cls, extents) -> "ParamRanges":
        h = extents[1]
        if h >= 64:
            return cls(size=(8.0, 24.0))
        return cls()


@dataclass
class GenParams:
    """Everything needed to re-render a sample, recorded exactly as used."""

    motion_class: str
    shape: str
    size: float
    color: tuple
    speed: float
    accelerate: bool
    direction: float
    noise_level: float
    rotation_rate: float
    zoom_rate: float
    start: tuple  # (row, col)
    orientation: float
    noise_seed: int
    turn_frame: Optional[int] = None
    turn_delta: Optional[float] = None
    sweep_angle: Optional[float] = None
    walk_directions: Optional[tuple] = None

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["color"] = list(self.color)
        out["start"] = list(self.start)
        if self.walk_directions is not None:
            out["walk_directions"] = list(self.walk_directions)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "GenParams":
        data = dict(payload)
        data["color"] = tuple(data["color"])
        data["start"] = tuple(data["start"])
        if data.get("walk_directions") is not None:
            data["walk_directions"] = tuple(data["walk_directions"])
        return cls(**data)


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, H, W, 3] in [0, 1]
    label: int
    mask: np.ndarray  # [T, H, W] in {0, 1}
    params: GenParams


def _frame_speeds(params: GenParams, frames: int) -> np.ndarray:
    """Per-step speeds; an accelerating run ramps linearly 0.5x..1.5x."""
    steps = max(frames - 1, 1)
    if not params.accelerate:
        return np.full(steps, params.speed)
    ramp = np.linspace(0.5, 1.5, steps)
    return params.speed * ramp


def trajectory(params: GenParams, frames: int) -> np.ndarray:
    """Shape-center path [frames, 2] as (row, col) under the motion model."""
    speeds = _frame_speeds(params, frames)
    pos = np.zeros((frames, 2))
    pos[0] = params.start
    cls = params.motion_class
    if cls == "linear":
        step_dir = np.array([math.sin(params.direction), math.cos(params.direction)])
        for t in range(frames - 1):
            pos[t + 1] = pos[t] + speeds[t] * step_dir
    elif cls == "turn":
        theta = params.direction
        for t in range(frames - 1):
            if t + 1 == params.turn_frame:
                theta = params.direction + params.turn_delta
            pos[t + 1] = pos[t] + speeds[t] * np.array([math.sin(theta), math.cos(theta)])
    elif cls == "circular":
        sweep = params.sweep_angle
        arc = float(speeds.sum())
        radius = arc / abs(sweep)
        alpha = params.direction - math.copysign(math.pi / 2, sweep)
        center = pos[0] - radius * np.array([math.sin(alpha), math.cos(alpha)])
        dalpha = sweep * speeds / arc
        for t in range(frames - 1):
            alpha += dalpha[t]
            pos[t + 1] = center + radius * np.array([math.sin(alpha), math.cos(alpha)])
    elif cls == "random":
        dirs = params.walk_directions
        for t in range(frames - 1):
            theta = dirs[t]
            pos[t + 1] = pos[t] + speeds[t] * np.array([math.sin(theta), math.cos(theta)])
    else:
        raise UsageError(f"unknown motion class {cls!r}")
    return pos


def _max_size(params: GenParams, frames: int) -> float:
    zooms = params.zoom_rate ** np.arange(frames)
    return float(params.size * zooms.max())


def _reflect(value: float, lo: float, hi: float) -> float:
    # mirror back into [lo, hi]; steps are far smaller than the interval
    for _ in range(8):
        if value < lo:
            value = 2 * lo - value
        elif value > hi:
            value = 2 * hi - value
        else:
            break
    return float(np.clip(value, lo, hi))


def sample_params(
    motion_class: str,
    rng: np.random.Generator,
    ranges: ParamRanges,
    extents: Sequence[int],
) -> GenParams:
    """Draw parameters uniformly, rejecting trajectories that leave the frame."""
    if motion_class not in MOTION_CLASSES:
        raise UsageError(f"unknown motion class {motion_class!r}")
    frames, height, width = extents
    for _ in range(_REJECTION_BUDGET):
        size = rng.uniform(*ranges.size)
        speed = rng.uniform(*ranges.speed)
        zoom = rng.uniform(*ranges.zoom_rate)
        margin = size * max(1.0, zoom ** (frames - 1)) + 1.0
        lo_r, hi_r = margin, height - 1 - margin
        lo_c, hi_c = margin, width - 1 - margin
        if lo_r >= hi_r or lo_c >= hi_c:
            continue
        params = GenParams(
            motion_class=motion_class,
            shape=str(rng.choice(SHAPES)),
            size=size,
            color=tuple(rng.uniform(*ranges.color, size=3).round(6)),
            speed=speed,
            accelerate=bool(rng.random() < ranges.accelerate_prob),
            direction=float(rng.uniform(0.0, 2 * math.pi)),
            noise_level=float(rng.uniform(*ranges.noise)),
            rotation_rate=float(rng.uniform(*ranges.rotation_rate)),
            zoom_rate=zoom,
            start=(float(rng.uniform(lo_r, hi_r)), float(rng.uniform(lo_c, hi_c))),
            orientation=float(rng.uniform(0.0, 2 * math.pi)),
            noise_seed=int(rng.integers(0, 2**31 - 1)),
        )
        if motion_class == "turn":
            params.turn_frame = int(rng.integers(2, frames - 2)) if frames >= 5 else 1
            params.turn_delta = float(
                rng.uniform(*ranges.turn_angle) * (1 if rng.random() < 0.5 else -1)
            )
        elif motion_class == "circular":
            params.sweep_angle = float(
                rng.uniform(*ranges.sweep_angle) * (1 if rng.random() < 0.5 else -1)
            )
        elif motion_class == "random":
            params.walk_directions = tuple(
                float(v) for v in rng.uniform(0.0, 2 * math.pi, size=frames - 1)
            )
        if motion_class == "random":
            # reflecting walk: clamp the path instead of rejecting
            pos = trajectory(params, frames)
            ok = True
        else:
            pos = trajectory(params, frames)
            ok = bool(
                np.all((pos[:, 0] >= lo_r) & (pos[:, 0] <= hi_r))
                and np.all((pos[:, 1] >= lo_c) & (pos[:, 1] <= hi_c))
            )
        if ok:
            return params
    raise GenerationError(
        f"could not sample an in-frame {motion_class!r} trajectory in "
        f"{_REJECTION_BUDGET} tries for extents {tuple(extents)}"
    )


def _bounded_trajectory(params: GenParams, extents) -> np.ndarray:
    frames, height, width = extents
    pos = trajectory(params, frames)
    if params.motion_class == "random":
        margin = _max_size(params, frames) + 1.0
        lo_r, hi_r = margin, height - 1 - margin
        lo_c, hi_c = margin, width - 1 - margin
        cur = pos[0].copy()
        speeds = _frame_speeds(params, frames)
        for t in range(frames - 1):
            theta = params.walk_directions[t]
            cur = cur + speeds[t] * np.array([math.sin(theta), math.cos(theta)])
            cur[0] = _reflect(cur[0], lo_r, hi_r)
            cur[1] = _reflect(cur[1], lo_c, hi_c)
            pos[t + 1] = cur
    return pos


def rasterize_shape(
    kind: str, center, size: float, orientation: float, extents
) -> np.ndarray:
    """Hard binary support of the rotated shape on integer pixel centers."""
    height, width = extents
    rows = np.arange(height)[:, None] - center[0]
    cols = np.arange(width)[None, :] - center[1]
    cos_o, sin_o = math.cos(orientation), math.sin(orientation)
    u = cols * cos_o + rows * sin_o
    v = -cols * sin_o + rows * cos_o
    if kind == "circle":
        return (u * u + v * v) <= size * size
    if kind == "square":
        half = size / math.sqrt(2.0)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        # equilateral, circumradius = size, one vertex pointing up
        inside = np.ones((height, width), dtype=bool)
        for k in range(3):
            phi = math.pi / 2 + 2 * math.pi * k / 3
            inside &= (u * math.cos(phi) + v * math.sin(phi)) >= -size / 2
        return inside
    raise UsageError(f"unknown shape {kind!r}")


def render(params: GenParams, extents: Sequence[int]) -> VideoSample:
    """Rasterize the full clip: color fill, rotation/zoom, additive noise."""
    frames_n, height, width = (int(v) for v in extents)
    pos = _bounded_trajectory(params, extents)
    frames = np.zeros((frames_n, height, width, 3), dtype=np.float64)
    mask = np.zeros((frames_n, height, width), dtype=np.float64)
    color = np.asarray(params.color)
    for t in range(frames_n):
        size_t = params.size * params.zoom_rate**t
        orient_t = params.orientation + params.rotation_rate * t
        support = rasterize_shape(params.shape, pos[t], size_t, orient_t, (height, width))
        mask[t] = support
        frames[t][support] = color
    if params.noise_level > 0:
        noise_rng = np.random.default_rng(params.noise_seed)
        frames = frames + noise_rng.uniform(
            -params.noise_level, params.noise_level, size=frames.shape
        )
        frames = np.clip(frames, 0.0, 1.0)
    return VideoSample(
        frames=frames.astype(np.float32),
        label=MOTION_CLASSES.index(params.motion_class),
        mask=mask.astype(np.float32),
        params=params,
    )


def make_sample(
    motion_class: str, index: int, seed: int, extents, ranges: Optional[ParamRanges] = None
) -> VideoSample:
    """Deterministic sample from (seed, index); parallel-safe."""
    if ranges is None:
        ranges = ParamRanges.for_extents(extents)
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    params = sample_params(motion_class, rng, ranges, extents)
    return render(params, extents)


# ---------------------------------------------------------------------------
# dataset writing / reading


@dataclass
class DatasetSpec:
    per_class: int
    extents: tuple = (8, 28, 28)
    seed: int = 0
    ranges: Optional[ParamRanges] = None
    shard_size: int = 500

    def resolved_ranges(self) -> ParamRanges:
        return self.ranges if self.ranges is not None else ParamRanges.for_extents(self.extents)


def generate_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write shards + manifest; byte-identical for identical (spec, seed)."""
    if spec.per_class <= 0:
        raise UsageError("per_class must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranges = spec.resolved_ranges()
    total = spec.per_class * len(MOTION_CLASSES)
    manifest_path = out / "manifest.jsonl"
    shard_idx = -1
    shard_file = None
    shard_offset = 0
    try:
        with open(manifest_path, "w", encoding="utf-8") as manifest:
            for index in range(total):
                motion_class = MOTION_CLASSES[index % len(MOTION_CLASSES)]
                sample = make_sample(motion_class, index, spec.seed, spec.extents, ranges)
                if index % spec.shard_size == 0:
                    if shard_file is not None:
                        shard_file.close()
                    shard_idx += 1
                    shard_file = open(out / f"shard-{shard_idx:03d}.vct", "wb")
                    shard_offset = 0
                record = {
                    "index": index,
                    "label": sample.label,
                    "motion_class": motion_class,
                    "shard": f"shard-{shard_idx:03d}.vct",
                    "offset": shard_offset,
                    "params": sample.params.to_json(),
                }
                shard_offset += container.write_tensor(shard_file, sample.frames)
                shard_offset += container.write_tensor(shard_file, sample.mask)
                manifest.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if shard_file is not None:
            shard_file.close()
    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "per_class": spec.per_class,
                "extents": list(spec.extents),
                "seed": spec.seed,
                "shard_size": spec.shard_size,
                "classes": list(MOTION_CLASSES),
                "ranges": dataclasses.asdict(ranges),
            },
            fh,
            sort_keys=True,
            indent=2,
        )
    return manifest_path


class DatasetReader:
    """Random access over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise UsageError(f"no manifest.jsonl under {self.root}")
        self.records = [json.loads(line) for line in manifest.read_text().splitlines() if line]
        self.labels = np.array([r["label"] for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    def sample(self, index: int) -> VideoSample:
        rec = self.records[index]
        with open(self.root / rec["shard"], "rb") as fh:
            fh.seek(rec["offset"])
            frames = container.read_tensor(fh)
            mask = container.read_tensor(fh)
        return VideoSample(
            frames=frames,
            label=int(rec["label"]),
            mask=mask,
            params=GenParams.from_json(rec["params"]),
        )

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        samples = [self.sample(int(i)) for i in indices]
        frames = np.stack([s.frames for s in samples])
        masks = np.stack([s.mask for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return frames, labels, masks


# ---------------------------------------------------------------------------
# sanity baseline: hand-written centroid-track classifier


def mask_centroids(mask: np.ndarray) -> np.ndarray:
    """Per-frame foreground centroid (row, col); NaN for empty frames."""
    frames = mask.shape[0]
    out = np.full((frames, 2), np.nan)
    for t in range(frames):
        ys, xs = np.nonzero(mask[t])
        if len(ys):
            out[t] = (ys.mean(), xs.mean())
    return out


def _fit_line_rms(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 0.0
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    resid = centered - np.outer(centered @ vt[0], vt[0])
    return float(np.sqrt((resid**2).sum(axis=1).mean()))


def _fit_turn(pts: np.ndarray) -> tuple[float, float]:
    """Best two-segment line fit: (worst segment RMS, angle between segments)."""
    best_rms, best_angle = np.inf, 0.0
    for k in range(2, len(pts) - 1):
        head, tail = pts[: k + 1], pts[k:]
        rms = max(_fit_line_rms(head), _fit_line_rms(tail))
        if rms < best_rms:
            da, db = head[-1] - head[0], tail[-1] - tail[0]
            cross = da[0] * db[1] - da[1] * db[0]
            best_rms = rms
            best_angle = abs(math.atan2(cross, float(np.dot(da, db))))
    return best_rms, best_angle


def _fit_circle(pts: np.ndarray) -> tuple[float, float]:
    """Algebraic circle fit: (radial RMS, radius)."""
    x, y = pts[:, 1], pts[:, 0]
    design = np.stack([x, y, np.ones_like(x)], axis=1)
    sol, *_ = np.linalg.lstsq(design, x * x + y * y, rcond=None)
    cx, cy = sol[0] / 2, sol[1] / 2
    r2 = sol[2] + cx * cx + cy * cy
    if r2 <= 0:
        return np.inf, np.inf
    radius = math.sqrt(r2)
    dist = np.sqrt((x - cx) ** 2 + (y - cy) ** 2) - radius
    return float(np.sqrt((dist * dist).mean())), radius


def centroid_track_classify(mask: np.ndarray) -> int:
    """Hand-written motion classifier over the ground-truth centroid track.

    Compares line / two-segment / circle fits of the track. Exists to show
    the classes are learnably distinct before network training; ~80% on
    default tiny-extents data.
    """
    cents = mask_centroids(mask)
    cents = cents[~np.isnan(cents[:, 0])]
    if len(cents) < 5:
        return MOTION_CLASSES.index("random")
    rms_line = _fit_line_rms(cents)
    rms_turn, seg_angle = _fit_turn(cents)
    rms_circle, radius = _fit_circle(cents)
    smoothed = cents.copy()
    smoothed[1:-1] = 0.25 * cents[:-2] + 0.5 * cents[1:-1] + 0.25 * cents[2:]
    steps = np.diff(smoothed, axis=0)
    angles = np.arctan2(steps[:, 0], steps[:, 1])
    dtheta = (np.diff(angles) + np.pi) % (2 * np.pi) - np.pi
    signed_total, abs_total = abs(float(dtheta.sum())), float(np.abs(dtheta).sum())
    if rms_line < 0.2 and abs_total < 0.5:
        return MOTION_CLASSES.index("linear")
    if rms_circle < 0.2 and signed_total > 0.55 * abs_total and abs_total > 0.45 and radius < 40:
        return MOTION_CLASSES.index("circular")
    if rms_turn < 0.22 and rms_line > 1.8 * rms_turn and seg_angle > 0.55:
        return MOTION_CLASSES.index("turn")
    if rms_line < 1.25 * min(rms_turn, rms_circle):
        return MOTION_CLASSES.index("linear" if abs_total < 1.1 else "random")
    scores = {"linear": rms_line, "circular": rms_circle * 1.1, "turn": rms_turn * 1.2}
    best = min(scores, key=scores.get)
    if scores[best] > 0.5:
        best = "random"
    elif best == "circular" and signed_total <= 0.5 * abs_total:
        best = "random"
    elif best == "turn" and seg_angle < 0.5:
        best = "random"
    elif best == "linear" and abs_total > 1.1:
        best = "random"
    return MOTION_CLASSES.index(best)
