"""Deterministic synthetic scenes: boxes on a ground plane, an ego trajectory and rendered view features.

The world frame coincides with the ego frame of the final (current) frame.
Ground truth is voxelised in that frame. View features replace an image
backbone: every pixel ray is cast against the ground plane and the boxes, and
the nearest hit is encoded as ``one_hot(class) ⊕ 1/depth`` followed by a
fixed random projection to ``c_img`` channels (background pixels encode
class 0 and zero inverse depth).

Scene file layout (all little-endian)::

    offset  size              field
    0       8                 magic b"BEVOCCSC"
    8       4   u32           format version (1)
    12      12  u32 x3        grid dims X, Y, Z
    24      8   f64           voxel size (m)
    32      24  f64 x3        grid origin (corner, m)
    56      4   u32           class count C
    60      4   u32           frame count K
    64      4   u32           camera count V
    68      8   u32 x2        image width, height
    76      4   u32           feature channels c_img
    80      8   u64           seed
    88      V*200             per camera: intrinsics f64 3x3, extrinsics f64 4x4 (row-major)
    ...     K*128             per frame: ego-to-world pose f64 4x4
    ...     K*V*h*w*c_img*4   view features f32 [K, V, h, w, c_img]
    ...     X*Y*Z             gt labels u8 [X, Y, Z]
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, EgoPose, look_camera, rot_z
from .occ_head import OccupancyGrid

MAGIC = b"BEVOCCSC"
VERSION = 1
PROJECTION_SEED = 20240611
CLASS_NAMES = ("free", "ground", "vehicle", "pedestrian", "barrier", "structure")

_HEADER = struct.Struct("<8sI3Id3dIIIIIIQ")


class SceneGenerationError(RuntimeError):
    pass


class SceneConfigError(ValueError):
    pass


class SceneFormatError(IOError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SceneConfig:
    grid_dims: tuple = (32, 32, 8)
    voxel_size: float = 0.5
    z_min: float = -0.5
    n_classes: int = 6
    frames: int = 8
    cameras: int = 6
    image_size: tuple = (64, 32)  # (width, height)
    hfov_deg: float = 70.0
    camera_height: float = 1.6
    camera_pitch_deg: float = 10.0
    c_img: int = 32
    boxes: tuple = (5, 9)  # inclusive range
    moving_fraction: float = 0.3
    occupancy_band: tuple = (0.02, 0.30)
    max_retries: int = 50

    def validate(self) -> "SceneConfig":
        errs = []
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 1:
            errs.append(f"grid_dims must be three positive ints, got {self.grid_dims}")
        if self.voxel_size <= 0:
            errs.append("voxel_size must be positive")
        if not 3 <= self.n_classes <= len(CLASS_NAMES):
            errs.append(f"n_classes must be in [3, {len(CLASS_NAMES)}], got {self.n_classes}")
        if self.frames < 1:
            errs.append("frames must be >= 1")
        if self.cameras < 1:
            errs.append("cameras must be >= 1")
        if min(self.image_size) < 2:
            errs.append("image_size must be at least 2x2")
        if self.c_img < 1:
            errs.append("c_img must be >= 1")
        if self.boxes[0] < 0 or self.boxes[1] < self.boxes[0]:
            errs.append(f"boxes range invalid: {self.boxes}")
        if not 0 <= self.occupancy_band[0] < self.occupancy_band[1] <= 1:
            errs.append(f"occupancy_band invalid: {self.occupancy_band}")
        if errs:
            raise SceneConfigError("; ".join(errs))
        return self

    @property
    def origin(self) -> tuple:
        x, y, _ = self.grid_dims
        return (-x * self.voxel_size / 2, -y * self.voxel_size / 2, self.z_min)

    @property
    def z_range(self) -> float:
        return self.grid_dims[2] * self.voxel_size


@dataclass(frozen=True)
class ScenePrimitive:
    """An oriented box standing on the ground, or the ground plane (z <= 0)."""
    kind: str  # "box" | "ground_plane"
    class_id: int
    center: tuple = (0.0, 0.0)  # box footprint centre in the final frame (m)
    yaw: float = 0.0
    extents: tuple = (0.0, 0.0, 0.0)  # length, width, height (m)
    velocity: tuple = (0.0, 0.0)  # m per frame

    def at_frame(self, f: int, frames: int) -> "ScenePrimitive":
        back = frames - 1 - f
        c = (self.center[0] - self.velocity[0] * back, self.center[1] - self.velocity[1] * back)
        return ScenePrimitive(self.kind, self.class_id, c, self.yaw, self.extents, self.velocity)


@dataclass
class SceneSequence:
    poses: list  # EgoPose per frame, ego-to-world, oldest first; the last is the current frame
    view_features: np.ndarray  # [K, V, h, w, c_img] float32
    cameras: list
    gt: OccupancyGrid
    seed: int
    class_count: int
    primitives: list = field(default_factory=list)

    @property
    def frames(self) -> int:
        return len(self.poses)


# ----------------------------------------------------------------- camera rig

def make_rig(cfg: SceneConfig) -> list[CameraModel]:
    return [look_camera(2 * math.pi * i / cfg.cameras, (0.0, 0.0, cfg.camera_height), cfg.image_size,
                        cfg.hfov_deg, math.radians(cfg.camera_pitch_deg)) for i in range(cfg.cameras)]


def feature_projection(n_classes: int, c_img: int) -> np.ndarray:
    """Fixed ``(C + 1) x c_img`` projection shared by every scene."""
    return np.random.default_rng(PROJECTION_SEED).normal(size=(n_classes + 1, c_img)) / math.sqrt(n_classes + 1)


def encode_hits(class_map: np.ndarray, depth: np.ndarray, n_classes: int) -> np.ndarray:
    """``one_hot(class) ⊕ 1/depth`` before projection; background has class 0 and zero inverse depth."""
    enc = np.zeros(class_map.shape + (n_classes + 1,))
    np.put_along_axis(enc, class_map[..., None].astype(np.int64), 1.0, axis=-1)
    with np.errstate(divide="ignore"):
        enc[..., n_classes] = np.where(np.isfinite(depth), 1.0 / depth, 0.0)
    return enc


# ------------------------------------------------------------------ raycast

def _ray_box(origin, dirs, box: ScenePrimitive):
    """Entry distance of rays into an oriented box (inf on a miss)."""
    l, w, h = box.extents
    r = rot_z(-box.yaw)
    o = r @ (origin - np.array([box.center[0], box.center[1], 0.0]))
    d = dirs @ r.T
    lo = np.array([-l / 2, -w / 2, 0.0])
    hi = np.array([l / 2, w / 2, h])
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    tmin = np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(t0, t1)).max(-1)
    tmax = np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(t0, t1)).min(-1)
    hit = (tmin <= tmax) & (tmax > 0)
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


def _to_ego(prim: ScenePrimitive, pose: EgoPose) -> ScenePrimitive:
    inv = pose.world_to_ego()
    c = inv.apply(np.array([[prim.center[0], prim.center[1], 0.0]]))[0]
    yaw = prim.yaw - math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    return ScenePrimitive(prim.kind, prim.class_id, (c[0], c[1]), yaw, prim.extents, prim.velocity)


def raycast_pixels(prims_ego: list[ScenePrimitive], camera: CameraModel):
    """Nearest-hit class and range for every pixel; class 0 / inf where nothing is hit."""
    origin, dirs = camera.pixel_rays_ego()
    best = np.full(dirs.shape[:2], np.inf)
    cls = np.zeros(dirs.shape[:2], dtype=np.int64)
    for prim in prims_ego:
        if prim.kind == "ground_plane":
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
        else:
            t = _ray_box(origin, dirs, prim)
        closer = t < best
        best = np.where(closer, t, best)
        cls = np.where(closer, prim.class_id, cls)
    return cls, best


def render_view_features(prims_ego: list[ScenePrimitive], camera: CameraModel, c_img: int, n_classes: int,
                         return_maps: bool = False):
    """Per-view feature map ``(h, w, c_img)`` for primitives given in that frame's ego coordinates."""
    cls, depth = raycast_pixels(prims_ego, camera)
    feats = encode_hits(cls, depth, n_classes) @ feature_projection(n_classes, c_img)
    if return_maps:
        return feats, cls, depth
    return feats


# --------------------------------------------------------------- generation

_BOX_SHAPES = {  # class: (length range, width range, height range, can move)
    2: ((3.0, 4.5), (1.6, 2.0), (1.4, 2.0), True),
    3: ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9), True),
    4: ((1.5, 3.0), (0.3, 0.5), (0.8, 1.1), False),
    5: ((2.0, 4.0), (2.0, 4.0), (2.5, 3.4), False),
}


def _trajectory(rng, frames: int) -> list[EgoPose]:
    speed = rng.uniform(0.3, 0.8)
    yaw_rate = rng.uniform(-0.05, 0.05)
    poses = [EgoPose.identity()]
    x = y = yaw = 0.0
    for _ in range(frames - 1):
        x -= speed * math.cos(yaw)
        y -= speed * math.sin(yaw)
        yaw -= yaw_rate
        poses.append(EgoPose.from_xy_yaw(x, y, yaw))
    return poses[::-1]


def _footprint_radius(prim: ScenePrimitive) -> float:
    return 0.5 * math.hypot(prim.extents[0], prim.extents[1])


def _sample_boxes(rng, cfg: SceneConfig, poses: list[EgoPose]) -> list[ScenePrimitive]:
    n_boxes = int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))
    half = np.array(cfg.grid_dims[:2]) * cfg.voxel_size / 2
    box_classes = [c for c in _BOX_SHAPES if c < cfg.n_classes]
    ego_xy = np.array([p.t[:2] for p in poses])
    out: list[ScenePrimitive] = []
    attempts = 0
    while len(out) < n_boxes:
        attempts += 1
        if attempts > 200 * max(n_boxes, 1):
            raise SceneGenerationError(f"could not place {n_boxes} boxes")
        # make sure every box class shows up before repeating classes
        cls = box_classes[len(out)] if len(out) < len(box_classes) else int(rng.choice(box_classes))
        (l0, l1), (w0, w1), (h0, h1), movable = _BOX_SHAPES[cls]
        ext = (rng.uniform(l0, l1), rng.uniform(w0, w1), min(rng.uniform(h0, h1), cfg.z_range + cfg.z_min - 0.05))
        yaw = rng.uniform(-math.pi, math.pi)
        vel = (0.0, 0.0)
        if movable and rng.uniform() < cfg.moving_fraction:
            sp = rng.uniform(0.1, 0.4)
            vel = (sp * math.cos(yaw), sp * math.sin(yaw))
        rad = 0.5 * math.hypot(ext[0], ext[1])
        centre = rng.uniform(-half + rad, half - rad)
        prim = ScenePrimitive("box", cls, (float(centre[0]), float(centre[1])), float(yaw), ext, vel)
        ok = True
        for f in range(cfg.frames):
            c = np.array(prim.at_frame(f, cfg.frames).center)
            if np.min(np.linalg.norm(ego_xy - c, axis=1)) < rad + 1.5:
                ok = False
                break
            for other in out:
                oc = np.array(other.at_frame(f, cfg.frames).center)
                if np.linalg.norm(oc - c) < rad + _footprint_radius(other) + 0.3:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            out.append(prim)
    return out


def voxelize(prims: list[ScenePrimitive], cfg: SceneConfig) -> np.ndarray:
    """Label each voxel by the primitive containing its centre (later primitives win)."""
    x, y, z = cfg.grid_dims
    vs = cfg.voxel_size
    ox, oy, oz = cfg.origin
    cx = ox + (np.arange(x) + 0.5) * vs
    cy = oy + (np.arange(y) + 0.5) * vs
    cz = oz + (np.arange(z) + 0.5) * vs
    gx, gy, gz = np.meshgrid(cx, cy, cz, indexing="ij")
    labels = np.zeros((x, y, z), dtype=np.uint8)
    for prim in prims:
        if prim.kind == "ground_plane":
            labels[gz < 0] = prim.class_id
            continue
        l, w, h = prim.extents
        c, s = math.cos(prim.yaw), math.sin(prim.yaw)
        dx, dy = gx - prim.center[0], gy - prim.center[1]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        inside = (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (gz >= 0) & (gz <= h)
        labels[inside] = prim.class_id
    return labels


def _render_all(prims, poses, cameras, cfg):
    feats = np.zeros((len(poses), len(cameras), cfg.image_size[1], cfg.image_size[0], cfg.c_img), np.float32)
    seen = set()
    for f, pose in enumerate(poses):
        frame_prims = [_to_ego(p.at_frame(f, len(poses)), pose) for p in prims]
        for v, cam in enumerate(cameras):
            fm, cls, _ = render_view_features(frame_prims, cam, cfg.c_img, cfg.n_classes, return_maps=True)
            feats[f, v] = fm
            seen.update(np.unique(cls).tolist())
    return feats, seen


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSequence:
    """Pure function of ``(seed, cfg)``; retries placement until occupancy and visibility checks pass."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    cameras = make_rig(cfg)
    ground = ScenePrimitive("ground_plane", 1)
    n_vox = math.prod(cfg.grid_dims)
    for _ in range(cfg.max_retries):
        poses = _trajectory(rng, cfg.frames)
        try:
            prims = [ground] + _sample_boxes(rng, cfg, poses)
        except SceneGenerationError:
            continue
        labels = voxelize(prims, cfg)
        frac = np.count_nonzero(labels) / n_vox
        if not cfg.occupancy_band[0] <= frac <= cfg.occupancy_band[1]:
            continue
        feats, seen = _render_all(prims, poses, cameras, cfg)
        if not set(np.unique(labels[labels > 0]).tolist()) <= seen:
            continue
        gt = OccupancyGrid(labels, cfg.voxel_size, cfg.origin)
        return SceneSequence(poses, feats, cameras, gt, seed, cfg.n_classes, prims)
    raise SceneGenerationError(f"seed {seed}: no valid scene after {cfg.max_retries} attempts")


# ---------------------------------------------------------------------- io

def scene_to_bytes(scene: SceneSequence) -> bytes:
    k, v, h, w, c = scene.view_features.shape
    gx, gy, gz = scene.gt.dims
    head = _HEADER.pack(MAGIC, VERSION, gx, gy, gz, float(scene.gt.voxel_size), *map(float, scene.gt.origin),
                        scene.class_count, k, v, w, h, c, int(scene.seed))
    parts = [head]
    for cam in scene.cameras:
        parts.append(np.ascontiguousarray(cam.intrinsics, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(cam.extrinsics, dtype="<f8").tobytes())
    for pose in scene.poses:
        parts.append(np.ascontiguousarray(pose.matrix, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(scene.view_features, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(scene.gt.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def save_scene(scene: SceneSequence, path) -> None:
    data = scene_to_bytes(scene)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise SceneFormatError(f"truncated scene file: {what} needs {size} bytes, {len(buf) - offset} left", offset)
    return buf[offset:offset + size]


def load_scene(path, expect_dims: tuple | None = None) -> SceneSequence:
    with open(path, "rb") as fh:
        buf = fh.read()
    head = _take(buf, 0, _HEADER.size, "header")
    (magic, version, gx, gy, gz, vs, ox, oy, oz, n_cls, k, n_cam, w, h, c, seed) = _HEADER.unpack(head)
    if magic != MAGIC:
        raise SceneFormatError(f"bad magic {magic!r}, expected {MAGIC!r}: not a scene file", 0)
    if version != VERSION:
        raise SceneFormatError(f"unsupported scene format version {version} (expected {VERSION})", 8)
    if expect_dims is not None and tuple(expect_dims) != (gx, gy, gz):
        raise SceneConfigError(f"scene grid {(gx, gy, gz)} does not match expected grid {tuple(expect_dims)}")
    off = _HEADER.size
    cameras = []
    for _ in range(n_cam):
        kmat = np.frombuffer(_take(buf, off, 72, "intrinsics"), "<f8").reshape(3, 3)
        emat = np.frombuffer(_take(buf, off + 72, 128, "extrinsics"), "<f8").reshape(4, 4)
        cameras.append(CameraModel(kmat.copy(), emat.copy(), (w, h)))
        off += 200
    poses = []
    for _ in range(k):
        poses.append(EgoPose(np.frombuffer(_take(buf, off, 128, "pose"), "<f8").reshape(4, 4).copy()))
        off += 128
    n_feat = k * n_cam * h * w * c * 4
    feats = np.frombuffer(_take(buf, off, n_feat, "view features"), "<f4").reshape(k, n_cam, h, w, c).copy()
    off += n_feat
    labels = np.frombuffer(_take(buf, off, gx * gy * gz, "gt labels"), np.uint8).reshape(gx, gy, gz).copy()
    off += gx * gy * gz
    if off != len(buf):
        raise SceneFormatError(f"{len(buf) - off} trailing bytes after gt labels", off)
    if labels.size and labels.max() >= n_cls:
        raise SceneFormatError(f"gt label {labels.max()} out of range for {n_cls} classes", off - gx * gy * gz)
    gt = OccupancyGrid(labels, vs, (ox, oy, oz))
    return SceneSequence(poses, feats, cameras, gt, int(seed), int(n_cls))
