"""Ray-based occupancy evaluation.

LiDAR-like query rays are cast through a predicted and a ground-truth label
grid; the first occupied voxel along each ray gives a (class, depth) pair. A
ray is a true positive for class ``c`` when both grids hit ``c`` and the
depths differ by less than a threshold. Per-class IoU is computed from ray
counts and averaged over classes and over thresholds of 1, 2 and 4 m.

Voxel ``(i, j, k)`` covers ``origin + [i, i+1) * voxel_size`` per axis.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import EgoPose
from .occ_head import OccupancyGrid

THRESHOLDS = (1.0, 2.0, 4.0)


class RayError(ValueError):
    pass


class GeometryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class QueryRay:
    origin: np.ndarray
    direction: np.ndarray
    frame_index: int = 0


@dataclass(frozen=True)
class RayHit:
    depth: float  # inf on a miss
    class_id: int  # -1 on a miss

    @property
    def hit(self) -> bool:
        return self.class_id >= 0


@dataclass(frozen=True)
class RayPattern:
    channels: int = 32
    azimuths: int = 360
    elevation_range: tuple = (-30.0, 10.0)
    origin_height: float = 1.8

    def __post_init__(self):
        if self.channels < 1 or self.azimuths < 1:
            raise RayError(f"ray pattern counts must be >= 1, got {self.channels}x{self.azimuths}")


@dataclass
class RayBatch:
    """Rays as arrays; indexing yields :class:`QueryRay`."""
    origins: np.ndarray
    directions: np.ndarray
    frame_index: np.ndarray

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i) -> QueryRay:
        return QueryRay(self.origins[i], self.directions[i], int(self.frame_index[i]))

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        if isinstance(rays, RayBatch):
            return rays
        rays = list(rays)
        return cls(np.array([r.origin for r in rays], dtype=np.float64).reshape(-1, 3),
                   np.array([r.direction for r in rays], dtype=np.float64).reshape(-1, 3),
                   np.array([r.frame_index for r in rays], dtype=np.int64))


def pattern_directions(pattern: RayPattern) -> np.ndarray:
    """Unit directions, elevation-major: ``(channels * azimuths, 3)``."""
    lo, hi = pattern.elevation_range
    elev = np.radians(np.linspace(lo, hi, pattern.channels) if pattern.channels > 1 else np.array([lo]))
    az = 2.0 * np.pi * np.arange(pattern.azimuths) / pattern.azimuths
    e, a = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_query_rays(poses: list[EgoPose], pattern: RayPattern = RayPattern()) -> RayBatch:
    """Rays from each pose's sensor origin, expressed in the frame of ``poses[0]``.

    ``poses`` are ego-to-world; the sensor sits ``origin_height`` above each
    ego origin and the pattern is fixed to that pose's heading.
    """
    if not poses:
        raise RayError("need at least one pose")
    base = pattern_directions(pattern)
    to_cur = poses[0].world_to_ego()
    origins, dirs, frames = [], [], []
    for f, pose in enumerate(poses):
        rel = to_cur @ pose
        o = rel.apply(np.array([[0.0, 0.0, pattern.origin_height]]))[0]
        origins.append(np.broadcast_to(o, base.shape))
        dirs.append(base @ rel.rotation.T)
        frames.append(np.full(len(base), f, dtype=np.int64))
    return RayBatch(np.concatenate(origins), np.concatenate(dirs), np.concatenate(frames))


# ------------------------------------------------------------ traversal

def _slab(origin, direction, lo, hi):
    """Entry/exit parameters of a ray against an axis-aligned box (vectorised over rows)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    parallel = direction == 0
    inside = (origin >= lo) & (origin < hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def _start_index(pos, direction, dims):
    """Voxel entered at ``pos`` (in voxel units) by a ray moving along ``direction``."""
    fl = np.floor(pos)
    on_face = fl == pos
    idx = np.where((direction < 0) & on_face, fl - 1, fl).astype(np.int64)
    return np.clip(idx, 0, np.asarray(dims) - 1)


def cast_ray(grid: OccupancyGrid, ray: QueryRay) -> RayHit:
    """Step through the voxels a ray crosses, in order, and report the first occupied one."""
    d = np.asarray(ray.direction, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0:
        raise RayError("ray direction must be finite and non-zero")
    d = d / np.linalg.norm(d)
    vs = grid.voxel_size
    dims = np.array(grid.dims)
    o = (np.asarray(ray.origin, dtype=np.float64) - np.asarray(grid.origin)) / vs  # voxel units
    t_in, t_out = _slab(o, d, np.zeros(3), dims.astype(np.float64))
    t_in = max(t_in, 0.0)
    if not t_in < t_out:
        return RayHit(math.inf, -1)
    idx = _start_index(o + t_in * d, d, dims)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore"):
        nxt = np.where(d > 0, idx + 1, idx)
        t_max = np.where(d != 0, (nxt - o) / d, np.inf)
        t_delta = np.where(d != 0, 1.0 / np.abs(d), np.inf)
    t = t_in
    labels = grid.labels
    while True:
        lab = int(labels[idx[0], idx[1], idx[2]])
        if lab != 0:
            return RayHit(t * vs, lab)
        ax = int(np.argmin(t_max))
        t = t_max[ax]
        idx[ax] += step[ax]
        if idx[ax] < 0 or idx[ax] >= dims[ax]:
            return RayHit(math.inf, -1)
        t_max[ax] += t_delta[ax]


def cast_rays(grid: OccupancyGrid, rays) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`cast_ray`: returns ``(depth, class_id)`` arrays (inf / -1 on a miss)."""
    rb = RayBatch.from_rays(rays)
    n = len(rb)
    d = rb.directions.astype(np.float64)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if n and (not np.all(np.isfinite(d)) or np.any(norm == 0)):
        raise RayError("ray directions must be finite and non-zero")
    d = d / norm
    vs = grid.voxel_size
    dims = np.array(grid.dims)
    o = (rb.origins - np.asarray(grid.origin)) / vs
    t_in, t_out = _slab(o, d, np.zeros(3), dims.astype(np.float64))
    t_in = np.maximum(t_in, 0.0)
    depth = np.full(n, np.inf)
    cls = np.full(n, -1, dtype=np.int64)
    live = np.nonzero(t_in < t_out)[0]
    if len(live) == 0:
        return depth, cls
    o, d, t = o[live], d[live], t_in[live]
    idx = _start_index(o + t[:, None] * d, d, dims)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nxt = np.where(d > 0, idx + 1, idx)
        t_max = np.where(d != 0, (nxt - o) / d, np.inf)
        t_delta = np.where(d != 0, 1.0 / np.abs(d), np.inf)
    labels = grid.labels
    rows = np.arange(len(live))
    while len(live):
        lab = labels[idx[:, 0], idx[:, 1], idx[:, 2]]
        hit = lab != 0
        depth[live[hit]] = t[hit] * vs
        cls[live[hit]] = lab[hit]
        keep = ~hit
        ax = np.argmin(t_max, axis=1)
        r = rows[: len(live)]
        t = t_max[r, ax]
        idx[r, ax] += step[r, ax]
        t_max[r, ax] += t_delta[r, ax]
        inside = (idx[r, ax] >= 0) & (idx[r, ax] < dims[ax])
        keep &= inside
        live, o, d, t, idx, step, t_max, t_delta = (
            live[keep], o[keep], d[keep], t[keep], idx[keep], step[keep], t_max[keep], t_delta[keep])
    return depth, cls


# ------------------------------------------------------------- scoring

@dataclass
class RayCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def iou(self) -> np.ndarray:
        den = self.tp + self.fp + self.fn
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, self.tp / np.maximum(den, 1), np.nan)


@dataclass
class RayIoUResult:
    threshold: float
    per_class: np.ndarray  # nan where the class was never hit
    mean: float
    counts: RayCounts = field(repr=False)


def _check_geometry(pred: OccupancyGrid, gt: OccupancyGrid):
    if not pred.same_geometry(gt):
        raise GeometryMismatch(
            f"prediction grid {pred.dims} @ {pred.voxel_size} m from {pred.origin} does not match "
            f"ground truth {gt.dims} @ {gt.voxel_size} m from {gt.origin}")


def count_rays(pred_hit, gt_hit, threshold: float, n_classes: int) -> RayCounts:
    (dp, cp), (dg, cg) = pred_hit, gt_hit
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    both = (cp >= 0) & (cg >= 0)
    with np.errstate(invalid="ignore"):
        good = both & (cp == cg) & (np.abs(dp - dg) < threshold)
    np.add.at(tp, cp[good], 1)
    bad_p = (cp >= 0) & ~good
    bad_g = (cg >= 0) & ~good
    np.add.at(fp, cp[bad_p], 1)
    np.add.at(fn, cg[bad_g], 1)
    return RayCounts(tp, fp, fn)


def _result(counts: RayCounts, threshold: float) -> RayIoUResult:
    per = counts.iou()
    valid = per[~np.isnan(per)]
    return RayIoUResult(threshold, per, float(valid.mean()) if len(valid) else float("nan"), counts)


def evaluate_rayiou(pred: OccupancyGrid, gt: OccupancyGrid, rays, threshold: float,
                    n_classes: int | None = None) -> RayIoUResult:
    _check_geometry(pred, gt)
    n_classes = n_classes or int(max(pred.labels.max(), gt.labels.max())) + 1
    counts = count_rays(cast_rays(pred, rays), cast_rays(gt, rays), threshold, n_classes)
    return _result(counts, threshold)


def evaluate_thresholds(pred: OccupancyGrid, gt: OccupancyGrid, rays, n_classes: int,
                        thresholds=THRESHOLDS) -> list[RayIoUResult]:
    """Cast once, score at every threshold."""
    _check_geometry(pred, gt)
    ph, gh = cast_rays(pred, rays), cast_rays(gt, rays)
    return [_result(count_rays(ph, gh, t, n_classes), t) for t in thresholds]


def merge_results(per_scene: list[list[RayIoUResult]]) -> list[RayIoUResult]:
    """Pool ray counts over scenes, threshold by threshold."""
    if not per_scene:
        raise RayError("nothing to merge")
    merged = []
    for i, first in enumerate(per_scene[0]):
        tp = sum(r[i].counts.tp for r in per_scene)
        fp = sum(r[i].counts.fp for r in per_scene)
        fn = sum(r[i].counts.fn for r in per_scene)
        merged.append(_result(RayCounts(tp, fp, fn), first.threshold))
    return merged


def rayiou_mean(pred: OccupancyGrid, gt: OccupancyGrid, rays, n_classes: int | None = None) -> float:
    n_classes = n_classes or int(max(pred.labels.max(), gt.labels.max())) + 1
    return float(np.mean([r.mean for r in evaluate_thresholds(pred, gt, rays, n_classes)]))


# ------------------------------------------------------------- reports

def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def table_rows(results: list[RayIoUResult], class_names: list[str]) -> list[list[str]]:
    """Header, one row per class (free space skipped), per-threshold means, final RayIoU."""
    header = ["class"] + [f"IoU@{r.threshold:g}m" for r in results]
    rows = [header]
    for c in range(1, len(class_names)):
        rows.append([class_names[c]] + [_fmt(r.per_class[c]) for r in results])
    rows.append(["mean"] + [_fmt(r.mean) for r in results])
    rows.append(["RayIoU", _fmt(float(np.mean([r.mean for r in results])))] + [""] * (len(results) - 1))
    return rows


def write_csv(results: list[RayIoUResult], class_names: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(table_rows(results, class_names))


def format_table(results: list[RayIoUResult], class_names: list[str]) -> str:
    rows = table_rows(results, class_names)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    buf = io.StringIO()
    for k, row in enumerate(rows):
        buf.write("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() + "\n")
        if k == 0 or k == len(rows) - 3:
            buf.write("  ".join("-" * w for w in widths) + "\n")
    return buf.getvalue()
