"""INI run configuration with a fixed schema.

Three sections, every key optional (defaults below)::

    [scene]   grid_dims = 32,32,8      voxel_size, z_min, n_classes, frames, cameras,
              image_size = 64,32       hfov_deg, camera_height, camera_pitch_deg, c_img,
              boxes = 5,9              moving_fraction, occupancy_band = 0.02,0.30, max_retries
    [model]   channels, heads, instance_queries, layers, bev_stride, frames, points_per_frame,
              head, head_blocks, instance_conditioning, bev_pos, inst_pos, residual, ddn_eps, dtype
    [train]   steps, lr, min_lr, warmup, weight_decay, seed, eval_every, checkpoint_every

Unknown sections or keys, unparsable values and invalid combinations are
all collected and reported in one ``ConfigError``.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .model import ModelConfig, ModelConfigError
from .scene_gen import SceneConfig, SceneConfigError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainOptions:
    eval_every: int = 250
    checkpoint_every: int = 250

    def errors(self) -> list[str]:
        return [f"{f.name} must be >= 1" for f in fields(self) if getattr(self, f.name) < 1]


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainOptions = field(default_factory=TrainOptions)


_TRAIN_KEYS_IN_MODEL = ("steps", "lr", "min_lr", "warmup", "weight_decay", "seed")
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in _TRAIN_KEYS_IN_MODEL)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values, got {raw!r}")
        return tuple(type(d)(p) if not isinstance(d, int) else int(p) for d, p in zip(default, parts))
    return raw


def _format_value(val) -> str:
    if isinstance(val, tuple):
        return ",".join(str(v) for v in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val) if isinstance(val, float) else str(val)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    errs: list[str] = []
    schema = {
        "scene": (SceneConfig(), tuple(f.name for f in fields(SceneConfig))),
        "model": (ModelConfig(), _MODEL_KEYS),
        "train": (None, _TRAIN_KEYS_IN_MODEL + tuple(f.name for f in fields(TrainOptions))),
    }
    values: dict[str, dict] = {"scene": {}, "model": {}, "train": {}}
    for section in parser.sections():
        if section not in schema:
            errs.append(f"unknown section [{section}]")
            continue
        _, allowed = schema[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                errs.append(f"unknown key {key!r} in [{section}]")
                continue
            if section == "train" and key in _TRAIN_KEYS_IN_MODEL:
                default = getattr(ModelConfig(), key)
            elif section == "train":
                default = getattr(TrainOptions(), key)
            else:
                default = getattr(schema[section][0], key)
            try:
                values[section][key] = _parse_value(raw, default)
            except ValueError as exc:
                errs.append(f"[{section}] {key}: {exc}")
    if errs:
        raise ConfigError("; ".join(errs))
    scene = dataclasses.replace(SceneConfig(), **values["scene"])
    model_kw = dict(values["model"])
    model_kw.update({k: v for k, v in values["train"].items() if k in _TRAIN_KEYS_IN_MODEL})
    model = dataclasses.replace(ModelConfig(), **model_kw)
    train = dataclasses.replace(TrainOptions(), **{k: v for k, v in values["train"].items()
                                                   if k not in _TRAIN_KEYS_IN_MODEL})
    return validate(RunConfig(scene, model, train))


def validate(cfg: RunConfig) -> RunConfig:
    errs: list[str] = []
    try:
        cfg.scene.validate()
    except SceneConfigError as exc:
        errs.append(f"[scene] {exc}")
    errs.extend(f"[model] {e}" for e in cfg.model.errors())
    errs.extend(f"[train] {e}" for e in cfg.train.errors())
    if not errs:
        try:
            cfg.model.check_scene(cfg.scene.grid_dims, cfg.scene.frames)
        except ModelConfigError as exc:
            errs.append(f"[model] {exc}")
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text; ``parse_config(dump_config(c)) == c``."""
    lines = ["[scene]"]
    lines += [f"{f.name} = {_format_value(getattr(cfg.scene, f.name))}" for f in fields(SceneConfig)]
    lines += ["", "[model]"]
    lines += [f"{k} = {_format_value(getattr(cfg.model, k))}" for k in _MODEL_KEYS]
    lines += ["", "[train]"]
    lines += [f"{k} = {_format_value(getattr(cfg.model, k))}" for k in _TRAIN_KEYS_IN_MODEL]
    lines += [f"{f.name} = {_format_value(getattr(cfg.train, f.name))}" for f in fields(TrainOptions)]
    return "\n".join(lines) + "\n"
