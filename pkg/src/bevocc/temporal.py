"""Pillar anchors, temporal sampling and the point/channel mixing of sampled features.

Every BEV cell owns a pillar-shaped anchor. Its feature predicts box-relative
offsets for ``m`` points in each of ``k`` frames; the points are carried into
each past ego frame, projected into that frame's cameras and bilinearly
sampled. Features are averaged over the views that see a point, then mixed
across points and across channels and folded back into a single vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import BEVQueryGrid
from .geometry import Z_NEAR, CameraModel, EgoPose, transform_to_frame
from .numerics import Linear, Module, Tensor, mac_label, ops


class TemporalConfigError(ValueError):
    pass


@dataclass
class BEVAnchor:
    """Pillar anchors for all cells; only ``h`` is ever updated.

    ``x``, ``y`` are cell centres, ``z`` the fixed vertical centre, ``l``/``w``
    the cell footprint. ``h`` (one per cell) is a Tensor so that sampling
    stays differentiable with respect to the refinement layer.
    """
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    l: np.ndarray
    w: np.ndarray
    h: Tensor

    @classmethod
    def grid(cls, grid_dims, cell_size: float, x_min: float, y_min: float, z_min: float, z_range: float,
             dtype=np.float64) -> "BEVAnchor":
        rows, cols = grid_dims
        ix, iy = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        n = rows * cols
        return cls(
            x=(x_min + (ix.ravel() + 0.5) * cell_size).astype(dtype),
            y=(y_min + (iy.ravel() + 0.5) * cell_size).astype(dtype),
            z=np.full(n, z_min + z_range / 2.0, dtype=dtype),
            l=np.full(n, cell_size, dtype=dtype),
            w=np.full(n, cell_size, dtype=dtype),
            h=Tensor(np.full(n, z_range, dtype=dtype)),
        )

    @property
    def n(self) -> int:
        return len(self.x)

    def centers(self) -> np.ndarray:
        return np.stack([self.x, self.y, self.z], axis=1)

    def with_height(self, h: Tensor) -> "BEVAnchor":
        return BEVAnchor(self.x, self.y, self.z, self.l, self.w, h)


@dataclass
class SampledPointSet:
    """Gathered features ``O`` of shape ``(pillars, n, c)`` and validity ``mask`` ``(pillars, n)``."""
    O: Tensor  # noqa: E741
    mask: np.ndarray


# ---------------------------------------------------------------- sampling

class OffsetHead(Module):
    """Linear layer emitting ``k*m`` box-relative offset triples per pillar."""

    def __init__(self, c: int, frames: int, points: int, rng: np.random.Generator, dtype=np.float64,
                 zero_init: bool = False):
        if frames < 1 or points < 1:
            raise TemporalConfigError(f"frames and points_per_frame must be >= 1, got {frames}, {points}")
        self.frames, self.points = frames, points
        self.linear = Linear(c, frames * points * 3, rng, dtype, zero_init=zero_init)

    def forward(self, q_bev: Tensor) -> Tensor:
        raw = self.linear(q_bev)
        return ops.reshape(ops.tanh(raw), (q_bev.shape[0], self.frames, self.points, 3))


def generate_sampling_points(bev: BEVQueryGrid | Tensor, anchors: BEVAnchor, head: OffsetHead) -> Tensor:
    """Sampling points in the current ego frame, shape ``(pillars, k, m, 3)``.

    point = anchor centre + tanh(offset) * (l/2, w/2, h/2).
    """
    q = bev.features if isinstance(bev, BEVQueryGrid) else bev
    off = head(q)
    n = anchors.n
    dt = off.dtype
    half_lw = np.stack([anchors.l / 2, anchors.w / 2], axis=1).astype(dt)
    half = ops.concat([Tensor(half_lw), ops.reshape(anchors.h, (n, 1)) * 0.5], axis=1)
    return Tensor(anchors.centers().astype(dt)[:, None, None, :]) + off * ops.reshape(half, (n, 1, 1, 3))


def project_all_views(points: Tensor, cameras: list[CameraModel]):
    """Project ``(N, 3)`` ego points into every camera at once.

    Returns ``u``, ``v`` Tensors of shape ``(N, V)`` and the boolean validity.
    """
    dt = points.dtype
    rot = np.concatenate([c.extrinsics[:3, :3].T for c in cameras], axis=1).astype(dt)  # (3, 3V)
    trans = np.concatenate([c.extrinsics[:3, 3] for c in cameras]).astype(dt)
    n, nv = points.shape[0], len(cameras)
    with mac_label("gather"):
        pc = ops.reshape(ops.linear(points, Tensor(rot), Tensor(trans)), (n, nv, 3))
    k = np.stack([[c.fx, c.fy, c.cx, c.cy] for c in cameras]).astype(dt)
    size = np.array([c.image_size for c in cameras], dtype=dt)
    z_raw = pc.data[..., 2]
    front = z_raw > Z_NEAR
    safe = front.astype(dt)
    z = pc[..., 2] * safe + (1.0 - safe)
    u = pc[..., 0] / z * k[:, 0] + k[:, 2]
    v = pc[..., 1] / z * k[:, 1] + k[:, 3]
    valid = front & (u.data >= 0) & (u.data <= size[:, 0] - 1) & (v.data >= 0) & (v.data <= size[:, 1] - 1)
    return u, v, valid


def gather_temporal_features(points: Tensor, poses: list[EgoPose], cameras: list[CameraModel],
                             feature_maps) -> SampledPointSet:
    """Average multi-view bilinear samples for every point of every frame.

    ``points`` is ``(pillars, k, m, 3)`` in the current ego frame;
    ``poses[f]`` is the ego-to-world pose of frame ``f`` (index 0 is the
    current frame) and ``feature_maps[f]`` the ``(V, h, w, c)`` view features
    of that frame. Points seen by no view give zero rows and ``mask`` False.
    """
    n_p, k, m, _ = points.shape
    fmaps = feature_maps if isinstance(feature_maps, Tensor) else Tensor(np.asarray(feature_maps))
    if len(poses) != k or fmaps.shape[0] != k:
        raise TemporalConfigError(f"need {k} poses and feature frames, got {len(poses)} and {fmaps.shape[0]}")
    nv = len(cameras)
    if fmaps.shape[1] != nv:
        raise TemporalConfigError(f"feature maps carry {fmaps.shape[1]} views, {nv} cameras given")
    _, _, h, w, c = fmaps.shape
    cur = poses[0].world_to_ego()
    us, vs, maps, segs = [], [], [], []
    for f in range(k):
        pts = ops.reshape(points[:, f], (n_p * m, 3))
        # E_past @ inv(E_cur) with world-to-ego matrices: current ego -> past ego
        pts = transform_to_frame(pts, poses[f].world_to_ego(), cur)
        u, v, valid = project_all_views(pts, cameras)
        rows, views = np.nonzero(valid)
        if len(rows) == 0:
            continue
        us.append(u[rows, views])
        vs.append(v[rows, views])
        maps.append(f * nv + views)
        # flat point id in (pillar, frame, point) order
        pil, j = np.divmod(rows, m)
        segs.append((pil * k + f) * m + j)
    n_pts = n_p * k * m
    if not us:
        return SampledPointSet(Tensor(np.zeros((n_p, k * m, c), dtype=fmaps.dtype)), np.zeros((n_p, k * m), bool))
    seg = np.concatenate(segs)
    flat_maps = ops.reshape(fmaps, (k * nv, h, w, c))
    samples = ops.bilinear_sample(flat_maps, ops.concat(us), ops.concat(vs), np.concatenate(maps))
    summed = ops.segment_sum(samples, seg, n_pts)
    count = np.bincount(seg, minlength=n_pts).astype(fmaps.dtype)
    mean = summed * (1.0 / np.maximum(count, 1.0))[:, None]
    return SampledPointSet(ops.reshape(mean, (n_p, k * m, c)), (count > 0).reshape(n_p, k * m))


# ------------------------------------------------------------------ mixing

def ddn(o: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise with a single mean and variance over the last two axes (points x channels)."""
    if o.shape[-1] * o.shape[-2] < 2:
        raise TemporalConfigError("ddn needs at least two entries")
    return ops.normalize(o, axis=(-2, -1), eps=eps)


class MLPMix(Module):
    """Point mixing then channel mixing, each followed by DDN and ReLU, then a flatten-linear."""

    def __init__(self, n: int, c: int, c_out: int, rng: np.random.Generator, dtype=np.float64,
                 eps: float = 1e-5, zero_init_mixing: bool = False):
        self.n, self.c, self.eps = n, c, eps
        self.point = Linear(n, n, rng, dtype, zero_init=zero_init_mixing)
        self.chan = Linear(c, c, rng, dtype, zero_init=zero_init_mixing)
        self.out = Linear(n * c, c_out, rng, dtype)

    def forward(self, o: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if o.shape[-2:] != (self.n, self.c):
            raise TemporalConfigError(f"mix expects (..., {self.n}, {self.c}), got {o.shape}")
        if mask is not None:
            o = o * np.asarray(mask, dtype=o.dtype)[..., None]
        with mac_label("mix"):
            o1 = ops.swapaxes(self.point(ops.swapaxes(o, -1, -2)), -1, -2)
            o1 = ops.relu(ddn(o1, self.eps))
            o2 = ops.relu(ddn(self.chan(o1), self.eps))
            res = o + o2
            return self.out(ops.reshape(res, res.shape[:-2] + (self.n * self.c,)))


def mlp_mix(o: Tensor, mixer: MLPMix, mask: np.ndarray | None = None) -> Tensor:
    return mixer(o, mask)


# -------------------------------------------------------------- refinement

class HeightRefiner(Module):
    def __init__(self, c: int, z_range: float, rng: np.random.Generator, dtype=np.float64, zero_init: bool = False):
        self.z_range = float(z_range)
        self.linear = Linear(c, 1, rng, dtype, zero_init=zero_init)

    def forward(self, q_bev: Tensor, anchors: BEVAnchor) -> BEVAnchor:
        h = ops.sigmoid(self.linear(q_bev)) * self.z_range
        return anchors.with_height(ops.reshape(h, (anchors.n,)))


def refine_height(bev: BEVQueryGrid | Tensor, anchors: BEVAnchor, refiner: HeightRefiner) -> BEVAnchor:
    q = bev.features if isinstance(bev, BEVQueryGrid) else bev
    return refiner(q, anchors)
