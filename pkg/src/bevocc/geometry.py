"""Rigid poses, pinhole cameras and differentiable feature sampling.

Conventions
-----------
* ``EgoPose.matrix`` maps ego-frame coordinates to world coordinates.
* ``CameraModel.extrinsics`` maps ego-frame coordinates to camera coordinates
  (x right, y down, z forward); ``intrinsics`` is the usual ``K`` matrix.
* Pixel centres sit on integer ``(u, v)``; a projection is valid when the
  camera-frame depth exceeds ``Z_NEAR`` and ``0 <= u <= w-1``, ``0 <= v <= h-1``.

``transform_to_frame`` applies the alignment product ``E_past @ inv(E_cur)``
literally. With world-to-ego matrices as ``E`` it carries points expressed in
the current ego frame into the past ego frame, which is how the temporal
sampler uses it (see :meth:`EgoPose.world_to_ego`). The ego-to-world reading
would instead need ``inv(E_past) @ E_cur``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, ops

Z_NEAR = 0.1
FRAMES = ("current-ego", "past-ego", "camera", "world")


class PoseError(ValueError):
    pass


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid(rotation: np.ndarray, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


@dataclass(frozen=True)
class EgoPose:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise PoseError(f"pose must be 4x4, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, x: float, y: float, z: float = 0.0) -> "EgoPose":
        return cls(rigid(np.eye(3), (x, y, z)))

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "EgoPose":
        return cls(rigid(rot_z(yaw), (x, y, z)))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def is_rigid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
                and abs(np.linalg.det(r) - 1.0) <= tol
                and np.allclose(self.matrix[3], [0, 0, 0, 1], atol=tol, rtol=0))

    def validate(self) -> "EgoPose":
        if not np.all(np.isfinite(self.matrix)) or not self.is_rigid():
            raise PoseError("pose is not a rigid transform")
        return self

    def inverse(self) -> "EgoPose":
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise PoseError("singular pose matrix")
        r = self.rotation
        return EgoPose(rigid(r.T, -r.T @ self.t))

    def world_to_ego(self) -> "EgoPose":
        return self.inverse()

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.t

    def __matmul__(self, other: "EgoPose") -> "EgoPose":
        return EgoPose(self.matrix @ other.matrix)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple  # (width, height)

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        e = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", e)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        w, h = self.image_size
        if k.shape != (3, 3) or e.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if not (self.fx > 0 and self.fy > 0 and 0 <= self.cx < w and 0 <= self.cy < h):
            raise ValueError(f"invalid intrinsics fx={self.fx} fy={self.fy} cx={self.cx} cy={self.cy} for {w}x{h}")

    fx = property(lambda self: float(self.intrinsics[0, 0]))
    fy = property(lambda self: float(self.intrinsics[1, 1]))
    cx = property(lambda self: float(self.intrinsics[0, 2]))
    cy = property(lambda self: float(self.intrinsics[1, 2]))

    @property
    def center_ego(self) -> np.ndarray:
        r, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -r.T @ t

    def pixel_rays_ego(self) -> tuple[np.ndarray, np.ndarray]:
        """Origin and unit directions (ego frame) through every pixel centre, shape (h, w, 3)."""
        w, h = self.image_size
        uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        d_cam = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)
        d_ego = d_cam @ self.extrinsics[:3, :3]  # R^T applied row-wise
        d_ego /= np.linalg.norm(d_ego, axis=-1, keepdims=True)
        return self.center_ego, d_ego


def look_camera(yaw: float, position, image_size, hfov_deg: float, pitch: float = 0.0) -> CameraModel:
    """Camera at ``position`` (ego frame) looking along heading ``yaw``, pitched down by ``pitch``."""
    w, h = image_size
    fx = (w - 1) / 2.0 / np.tan(np.radians(hfov_deg) / 2.0)
    k = np.array([[fx, 0.0, (w - 1) / 2.0], [0.0, fx, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return CameraModel(k, rigid(r, -r @ np.asarray(position, dtype=np.float64)), (w, h))


@dataclass
class Point3Set:
    points: object  # (n, 3) ndarray or Tensor
    frame: str = "current-ego"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame tag {self.frame!r}")


@dataclass
class Projection:
    u: object
    v: object
    valid: np.ndarray
    depth: np.ndarray = field(repr=False)


def _affine(points, matrix: np.ndarray):
    r, t = matrix[:3, :3], matrix[:3, 3]
    if isinstance(points, Tensor):
        return ops.linear(points, Tensor(r.T.astype(points.dtype)), Tensor(t.astype(points.dtype)))
    return np.asarray(points) @ r.T + t


def transform_to_frame(points, e_past: EgoPose, e_cur: EgoPose, frame: str = "past-ego"):
    """Apply ``E_past @ inv(E_cur)`` to points; differentiable in the points."""
    m = e_past.matrix @ e_cur.inverse().matrix
    if isinstance(points, Point3Set):
        return Point3Set(_affine(points.points, m), frame)
    return _affine(points, m)


def project_to_view(points, cam: CameraModel) -> Projection:
    """Pinhole projection of ego-frame points; invalid points are flagged, not dropped."""
    if isinstance(points, Point3Set):
        if points.frame == "camera":
            raise ValueError("project_to_view expects ego-frame points")
        points = points.points
    pc = _affine(points, cam.extrinsics)
    w, h = cam.image_size
    if isinstance(pc, Tensor):
        z_raw = pc.data[..., 2]
        front = z_raw > Z_NEAR
        safe = front.astype(pc.dtype)
        z = pc[..., 2] * safe + (1.0 - safe)
        u = pc[..., 0] / z * cam.fx + cam.cx
        v = pc[..., 1] / z * cam.fy + cam.cy
        ud, vd = u.data, v.data
    else:
        z_raw = pc[..., 2]
        front = z_raw > Z_NEAR
        z = np.where(front, z_raw, 1.0)
        u = pc[..., 0] / z * cam.fx + cam.cx
        v = pc[..., 1] / z * cam.fy + cam.cy
        ud, vd = u, v
    valid = front & (ud >= 0) & (ud <= w - 1) & (vd >= 0) & (vd <= h - 1)
    return Projection(u, v, valid, z_raw)


def bilinear_sample(feature_map, u, v, index=None) -> Tensor:
    """Border-clamped bilinear lookup; see :func:`bevocc.numerics.ops.bilinear_sample`."""
    return ops.bilinear_sample(feature_map, u, v, index)
