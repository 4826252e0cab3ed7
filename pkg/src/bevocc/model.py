"""The full encoder/decoder wiring, the training step and inference."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import (
    BiAttnWeights,
    InteractionLayer,
    attention_cost,
    sine_pos_encoding,
)
from .numerics import AdamW, Module, Tensor, count_macs, cosine_lr, finite_checks, ops
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.nn import normal
from .occ_head import (
    HEADS,
    OccupancyGrid,
    build_head,
    compute_class_weights,
    downsample_labels,
    pool_height,
    total_loss,
)
from .rayiou import RayPattern, evaluate_thresholds, generate_query_rays
from .scene_gen import SceneSequence
from .temporal import BEVAnchor, HeightRefiner, MLPMix, OffsetHead, gather_temporal_features, generate_sampling_points

DTYPES = {"float32": np.float32, "float64": np.float64}
BEV_POS = ("sine", "none")
INST_POS = ("learned", "none")


class ModelConfigError(ValueError):
    pass


class ModelError(RuntimeError):
    """A module failure inside the encoder, tagged with the layer index."""

    def __init__(self, layer: int, exc: Exception):
        super().__init__(f"encoder layer {layer}: {type(exc).__name__}: {exc}")
        self.layer = layer


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    heads: int = 4
    instance_queries: int = 16
    layers: int = 4
    bev_stride: int = 2
    frames: int = 0  # 0: use every frame of the scene
    points_per_frame: int = 4
    head: str = "height_aware"
    head_blocks: int = 2
    instance_conditioning: bool = False
    bev_pos: str = "sine"
    inst_pos: str = "learned"
    residual: bool = True
    ddn_eps: float = 1e-5
    dtype: str = "float32"
    # optimisation
    steps: int = 1000
    lr: float = 2e-3
    min_lr: float = 1e-4
    warmup: int = 20
    weight_decay: float = 0.01
    seed: int = 0

    def errors(self) -> list[str]:
        errs = []
        for name in ("channels", "heads", "instance_queries", "layers", "bev_stride", "points_per_frame",
                     "head_blocks"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.heads >= 1 and self.channels >= 1 and self.channels % self.heads:
            errs.append(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.bev_pos == "sine" and self.channels % 4:
            errs.append(f"sine BEV encoding needs channels divisible by 4, got {self.channels}")
        if self.frames < 0:
            errs.append(f"frames must be >= 0, got {self.frames}")
        if self.head not in HEADS:
            errs.append(f"head must be one of {HEADS}, got {self.head!r}")
        if self.bev_pos not in BEV_POS:
            errs.append(f"bev_pos must be one of {BEV_POS}, got {self.bev_pos!r}")
        if self.inst_pos not in INST_POS:
            errs.append(f"inst_pos must be one of {INST_POS}, got {self.inst_pos!r}")
        if self.dtype not in DTYPES:
            errs.append(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.ddn_eps <= 0:
            errs.append("ddn_eps must be positive")
        if self.steps < 0:
            errs.append("steps must be >= 0")
        if self.lr < 0 or self.min_lr < 0:
            errs.append("lr and min_lr must be >= 0")
        if self.warmup < 0:
            errs.append("warmup must be >= 0")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ModelConfigError("; ".join(errs))
        return self

    def check_scene(self, grid_dims, frames: int) -> None:
        errs = []
        x, y, z = grid_dims
        if x % self.bev_stride or y % self.bev_stride:
            errs.append(f"bev_stride {self.bev_stride} does not divide grid {x}x{y}")
        if z % 2:
            errs.append(f"grid height {z} must be even for the coarse supervision scale")
        if self.frames > frames:
            errs.append(f"model uses {self.frames} frames but the scene has {frames}")
        n_b = (x // max(1, self.bev_stride)) * (y // max(1, self.bev_stride))
        if self.instance_queries >= n_b:
            errs.append(f"instance_queries {self.instance_queries} must be fewer than BEV cells {n_b}")
        if errs:
            raise ModelConfigError("; ".join(errs))


@dataclass
class SceneGeometry:
    grid_dims: tuple
    voxel_size: float
    origin: tuple
    n_classes: int
    c_img: int
    frames: int
    cameras: list

    @classmethod
    def of(cls, scene: SceneSequence) -> "SceneGeometry":
        return cls(tuple(scene.gt.dims), scene.gt.voxel_size, tuple(scene.gt.origin), scene.class_count,
                   scene.view_features.shape[-1], scene.frames, scene.cameras)


@dataclass
class ForwardOutput:
    logits: list  # [(X, Y, Z, C), (X, Y, Z/2, C)]
    attention: list = field(default_factory=list)  # BiAttnWeights per layer
    anchors: list = field(default_factory=list)  # BEVAnchor after each refinement
    macs: dict = field(default_factory=dict)


class EncoderLayer(Module):
    """Temporal sampling and mixing, bidirectional interaction, then height refinement."""

    def __init__(self, cfg: ModelConfig, frames: int, c_img: int, z_range: float, rng, dtype):
        c = cfg.channels
        self.offsets = OffsetHead(c, frames, cfg.points_per_frame, rng, dtype)
        self.mixer = MLPMix(frames * cfg.points_per_frame, c_img, c, rng, dtype, eps=cfg.ddn_eps)
        self.interaction = InteractionLayer(c, cfg.heads, rng, dtype, residual=cfg.residual)
        self.refiner = HeightRefiner(c, z_range, rng, dtype)


class InstanceBEV(Module):
    def __init__(self, cfg: ModelConfig, geom: SceneGeometry):
        cfg.validate()
        cfg.check_scene(geom.grid_dims, geom.frames)
        self.cfg, self.geom = cfg, geom
        dtype = DTYPES[cfg.dtype]
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        x, y, z = geom.grid_dims
        s = cfg.bev_stride
        self.bev_dims = (x // s, y // s)
        self.frames = cfg.frames or geom.frames
        self.z_range = z * geom.voxel_size
        n_b = self.bev_dims[0] * self.bev_dims[1]
        self.bev_query = normal(rng, (n_b, c), 1.0, dtype)
        self.inst_query = normal(rng, (cfg.instance_queries, c), 1.0, dtype)
        self.inst_pos = normal(rng, (cfg.instance_queries, c), 1.0, dtype) if cfg.inst_pos == "learned" else None
        self.bev_pos = (sine_pos_encoding(self.bev_dims, c) if cfg.bev_pos == "sine"
                        else np.zeros((n_b, c))).astype(dtype)
        self.layers = [EncoderLayer(cfg, self.frames, geom.c_img, self.z_range, rng, dtype) for _ in range(cfg.layers)]
        self.head = build_head(cfg.head, c, geom.grid_dims, geom.n_classes, rng, dtype, cfg.head_blocks,
                               self.bev_dims, cfg.instance_conditioning)

    def initial_anchors(self) -> BEVAnchor:
        ox, oy, oz = self.geom.origin
        cell = self.geom.voxel_size * self.cfg.bev_stride
        return BEVAnchor.grid(self.bev_dims, cell, ox, oy, oz, self.z_range, self.dtype)

    def check_scene(self, scene: SceneSequence) -> None:
        geom = SceneGeometry.of(scene)
        mine = (self.geom.grid_dims, self.geom.voxel_size, self.geom.n_classes, self.geom.c_img)
        theirs = (geom.grid_dims, geom.voxel_size, geom.n_classes, geom.c_img)
        if mine != theirs or len(scene.cameras) != len(self.geom.cameras) or scene.frames < self.frames:
            raise ModelConfigError(
                f"scene (dims, voxel, classes, c_img)={theirs} with {len(scene.cameras)} cameras and "
                f"{scene.frames} frames does not fit the model {mine} with {len(self.geom.cameras)} cameras "
                f"and {self.frames} frames")

    def forward(self, scene: SceneSequence) -> ForwardOutput:
        self.check_scene(scene)
        # scenes store frames oldest first; the temporal path wants the current frame first
        poses = scene.poses[::-1][:self.frames]
        fmaps = Tensor(np.ascontiguousarray(scene.view_features[::-1][:self.frames]).astype(self.dtype))
        q_bev = self.bev_query + 0.0
        inst = self.inst_query + 0.0
        inst_pos = self.inst_pos if self.inst_pos is not None else Tensor(np.zeros(inst.shape, self.dtype))
        bev_pos = Tensor(self.bev_pos)
        anchors = self.initial_anchors()
        out = ForwardOutput(logits=[])
        with count_macs() as counter:
            for i, layer in enumerate(self.layers):
                try:
                    pts = generate_sampling_points(q_bev, anchors, layer.offsets)
                    sampled = gather_temporal_features(pts, poses, scene.cameras, fmaps)
                    q_bev = q_bev + layer.mixer(sampled.O, sampled.mask)
                    inst, q_bev = layer.interaction(inst, inst_pos, q_bev, bev_pos, self.bev_dims)
                    anchors = layer.refiner(q_bev, anchors)
                except (ArithmeticError, ValueError, IndexError) as exc:
                    raise ModelError(i, exc) from exc
                out.attention.append(layer.interaction.last_weights)
                out.anchors.append(anchors)
            p = ops.reshape(q_bev, self.bev_dims + (self.cfg.channels,))
            fine = self.head(p, inst) if self.cfg.instance_conditioning else self.head(p)
        out.logits = [fine, pool_height(fine, 2)]
        out.macs = dict(counter.counts)
        return out

    def attention_report(self, macs: dict) -> dict:
        """Analytic vs instrumented multiply-adds of the attention blocks over all layers."""
        n_b = self.bev_dims[0] * self.bev_dims[1]
        cost = attention_cost(self.cfg.instance_queries, n_b, self.cfg.channels, self.cfg.heads)
        analytic = self.cfg.layers * (cost.bixattn_total + cost.inst_self_total)
        measured = sum(macs.get(k, 0) for k in ("proj", "attn_scores", "attn_values"))
        return {"analytic": analytic, "measured": measured, "rel_diff": abs(measured - analytic) / analytic}


# ------------------------------------------------------------------ training

def supervision(gt: np.ndarray, n_classes: int) -> list[np.ndarray]:
    return [gt, downsample_labels(gt, 2, n_classes)]


@dataclass
class TrainState:
    model: InstanceBEV
    optim: AdamW
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)  # (step, loss, lr)

    @classmethod
    def create(cls, cfg: ModelConfig, geom: SceneGeometry) -> "TrainState":
        model = InstanceBEV(cfg, geom)
        optim = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        return cls(model, optim, 0, np.random.default_rng(cfg.seed + 1), [])

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg


def current_lr(state: TrainState) -> float:
    cfg = state.cfg
    return cosine_lr(state.step, max(1, cfg.steps), cfg.lr, cfg.min_lr, cfg.warmup)


def train_step(state: TrainState, scene: SceneSequence, class_weights: np.ndarray) -> float:
    """Forward, loss, backward and one AdamW update; returns the loss before the update."""
    model = state.model
    state.optim.zero_grad()
    parts: dict = {}
    # per-op finiteness checks are skipped here; the loss and every gradient are checked below
    with finite_checks(False):
        out = model.forward(scene)
        loss = total_loss(out.logits, supervision(scene.gt.labels, scene.class_count), class_weights, parts)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss {value} at step {state.step}; components {parts}")
        loss.backward()
    lr = current_lr(state)
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteLoss(f"non-finite gradient in {name} at step {state.step}")
    state.optim.step(lr)
    state.history.append((state.step, value, lr))
    state.step += 1
    return value


def dataset_weights(scenes: list[SceneSequence]) -> np.ndarray:
    labels = np.concatenate([s.gt.labels.ravel() for s in scenes])
    return compute_class_weights(labels, scenes[0].class_count)


def train(state: TrainState, scenes: list[SceneSequence], steps: int, callback=None) -> TrainState:
    """Runs until ``state.step == steps``, cycling through ``scenes`` in order."""
    weights = dataset_weights(scenes)
    while state.step < steps:
        train_step(state, scenes[state.step % len(scenes)], weights)
        if callback is not None:
            callback(state)
    return state


def infer(state_or_model, scene: SceneSequence) -> OccupancyGrid:
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    logits = model.forward(scene).logits[0].data
    labels = np.argmax(logits, axis=-1).astype(np.uint8)
    return OccupancyGrid(labels, scene.gt.voxel_size, scene.gt.origin)


def voxel_accuracy(pred: OccupancyGrid, gt: OccupancyGrid) -> float:
    return float(np.mean(pred.labels == gt.labels))


def evaluation_rays(scene: SceneSequence, pattern: RayPattern = RayPattern()):
    return generate_query_rays(scene.poses[::-1], pattern)


def evaluate(state_or_model, scene: SceneSequence, pattern: RayPattern = RayPattern()):
    """Returns ``(per-threshold RayIoU results, voxel accuracy, predicted grid)``."""
    pred = infer(state_or_model, scene)
    results = evaluate_thresholds(pred, scene.gt, evaluation_rays(scene, pattern), scene.class_count)
    return results, voxel_accuracy(pred, scene.gt), pred


# --------------------------------------------------------------- persistence

def _rng_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def _rng_from_json(text: str) -> np.random.Generator:
    state = json.loads(text)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def config_to_json(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    raw = json.loads(text)
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in raw.items() if k in known})


def geometry_meta(geom: SceneGeometry) -> dict:
    return {"grid_dims": ",".join(map(str, geom.grid_dims)), "voxel_size": repr(geom.voxel_size),
            "n_classes": geom.n_classes, "c_img": geom.c_img, "frames": geom.frames}


def save_state(state: TrainState, path, extra_meta: dict | None = None):
    arrays = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    arrays.update(state.optim.state_arrays())
    hist = np.array(state.history, dtype=np.float64).reshape(-1, 3)
    arrays["history"] = hist
    meta = {"step": state.step, "optim_t": state.optim.t, "rng": _rng_json(state.rng),
            "config": config_to_json(state.cfg)}
    meta.update({f"geom.{k}": v for k, v in geometry_meta(state.model.geom).items()})
    meta.update(extra_meta or {})
    return save_checkpoint(path, arrays, meta)


def load_state(path, scene: SceneSequence) -> TrainState:
    """Rebuilds the model for ``scene``'s geometry and restores parameters, moments, step and rng."""
    arrays, meta = load_checkpoint(path)
    cfg = config_from_json(meta["config"])
    geom = SceneGeometry.of(scene)
    expected = {k: str(v) for k, v in geometry_meta(geom).items()}
    stored = {k[len("geom."):]: v for k, v in meta.items() if k.startswith("geom.")}
    diff = {k: (stored.get(k), expected[k]) for k in expected if k != "frames" and stored.get(k) != expected[k]}
    if diff:
        raise ModelConfigError(f"checkpoint geometry does not match the scene: " +
                               ", ".join(f"{k}: checkpoint {a} vs scene {b}" for k, (a, b) in diff.items()))
    geom.frames = int(stored.get("frames", geom.frames))
    state = TrainState.create(cfg, geom)
    state.model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    state.optim.load_state_arrays(arrays, int(meta["optim_t"]))
    state.step = int(meta["step"])
    state.rng = _rng_from_json(meta["rng"])
    state.history = [(int(s), float(l), float(r)) for s, l, r in arrays["history"]]
    return state


def attention_dump(out: ForwardOutput) -> dict[str, np.ndarray]:
    """Raw per-layer attention arrays keyed ``layer<i>.<logits|over_bev|over_inst>``."""
    dump = {}
    for i, w in enumerate(out.attention):
        if isinstance(w, BiAttnWeights):
            dump[f"layer{i}.logits"] = w.logits
            dump[f"layer{i}.over_bev"] = w.over_bev
            dump[f"layer{i}.over_inst"] = w.over_inst
        dump[f"layer{i}.anchor_h"] = out.anchors[i].h.data
    return dump


__all__ = [
    "EncoderLayer", "ForwardOutput", "InstanceBEV", "ModelConfig", "ModelConfigError",
    "ModelError", "NonFiniteLoss", "SceneGeometry", "TrainState", "attention_dump",
    "current_lr", "dataset_weights", "evaluate", "evaluation_rays", "infer", "load_state", "save_state",
    "supervision", "train", "train_step", "voxel_accuracy",
]
