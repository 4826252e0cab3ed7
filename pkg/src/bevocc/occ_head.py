"""Voxel decoders and the occupancy training loss.

Two heads turn a BEV feature map ``P`` (rows x cols x c) into voxel logits
(rows x cols x Z x C). The height-aware head broadcasts each pillar feature
along height and adds a learned height-dependent residual; the
channel-to-height head reinterprets projected channels as (Z, C) slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Conv2d, Linear, Module, Tensor, mac_label, ops

HEADS = ("height_aware", "channel_to_height")


class HeadConfigError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    """Voxel labels ``(X, Y, Z)`` (0 = free) with the grid corner and voxel size in the ego frame."""
    labels: np.ndarray
    voxel_size: float
    origin: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.origin = tuple(float(o) for o in self.origin)
        if self.labels.ndim != 3:
            raise ValueError(f"occupancy labels must be 3-D, got shape {self.labels.shape}")

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    def same_geometry(self, other: "OccupancyGrid") -> bool:
        return (self.dims == other.dims and self.voxel_size == other.voxel_size
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12))


# ------------------------------------------------------------------ heads

class ResidualConvStack(Module):
    """``x + conv(relu(conv(x)))`` blocks with 3x3 kernels."""

    def __init__(self, c: int, blocks: int, rng: np.random.Generator, dtype=np.float64):
        self.blocks = [(Conv2d(c, c, 3, rng, dtype), Conv2d(c, c, 3, rng, dtype)) for _ in range(blocks)]
        self.convs = [conv for pair in self.blocks for conv in pair]

    def forward(self, x: Tensor) -> Tensor:
        with mac_label("head"):
            for a, b in self.blocks:
                x = x + b(ops.relu(a(x)))
        return x


class InstanceConditioning(Module):
    """Single-head cross-attention from voxel features to instance features."""

    def __init__(self, c: int, rng: np.random.Generator, dtype=np.float64):
        self.q = Linear(c, c, rng, dtype)
        self.k = Linear(c, c, rng, dtype)
        self.v = Linear(c, c, rng, dtype, zero_init=True)
        self.scale = 1.0 / np.sqrt(c)

    def forward(self, vox: Tensor, inst: Tensor) -> Tensor:
        shape = vox.shape
        flat = ops.reshape(vox, (-1, shape[-1]))
        with mac_label("head"):
            att = ops.softmax(ops.matmul(self.q(flat), ops.transpose(self.k(inst))) * self.scale, axis=-1)
            upd = ops.matmul(att, self.v(inst))
        return vox + ops.reshape(upd, shape)


def _upsample(p: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return p
    r, q, c = p.shape
    x = ops.broadcast_to(ops.reshape(p, (r, 1, q, 1, c)), (r, factor, q, factor, c))
    return ops.reshape(x, (r * factor, q * factor, c))


def _upsample_factor(bev_dims, voxel_dims) -> int:
    fr, rr = divmod(voxel_dims[0], bev_dims[0])
    fc, rc = divmod(voxel_dims[1], bev_dims[1])
    if rr or rc or fr != fc or fr < 1:
        raise HeadConfigError(f"BEV grid {tuple(bev_dims)} does not evenly divide voxel grid {tuple(voxel_dims[:2])}")
    return fr


class HeightAwareHead(Module):
    """Pillar feature broadcast along height plus a residual from a conv stack and height expansion."""

    def __init__(self, c: int, voxel_dims, n_classes: int, rng: np.random.Generator, dtype=np.float64,
                 blocks: int = 2, bev_dims=None, instance_conditioning: bool = False, zero_residual: bool = False):
        self.c, self.n_classes = c, n_classes
        self.voxel_dims = tuple(voxel_dims)
        self.z = self.voxel_dims[2]
        self.factor = _upsample_factor(bev_dims or voxel_dims[:2], voxel_dims)
        self.convs = ResidualConvStack(c, blocks, rng, dtype)
        self.expand = Linear(c, self.z * c, rng, dtype, zero_init=zero_residual)
        self.cond = InstanceConditioning(c, rng, dtype) if instance_conditioning else None
        self.classifier = Linear(c, n_classes, rng, dtype)

    def residual(self, p: Tensor) -> Tensor:
        """Height-dependent residual, shape ``(X, Y, Z, c)``."""
        p = _upsample(p, self.factor)
        h = self.convs(p)
        with mac_label("head"):
            e = self.expand(ops.relu(h))
        return ops.reshape(e, p.shape[:2] + (self.z, self.c))

    def voxel_features(self, p: Tensor) -> Tensor:
        up = _upsample(p, self.factor)
        base = ops.broadcast_to(ops.reshape(up, up.shape[:2] + (1, self.c)), up.shape[:2] + (self.z, self.c))
        return base + self.residual(p)

    def forward(self, p: Tensor, inst: Tensor | None = None) -> Tensor:
        v = self.voxel_features(p)
        if self.cond is not None and inst is not None:
            v = self.cond(v, inst)
        with mac_label("head"):
            return self.classifier(v)


class ChannelToHeightHead(Module):
    """Conv stack, then a projection whose channels are read as ``(Z, C)``.

    With ``hidden`` set, the projection is a two-layer MLP, used to match the
    parameter budget of the height-aware head.
    """

    def __init__(self, c: int, voxel_dims, n_classes: int, rng: np.random.Generator, dtype=np.float64,
                 blocks: int = 2, bev_dims=None, hidden: int | None = None, identity_projection: bool = False):
        self.c, self.n_classes = c, n_classes
        self.voxel_dims = tuple(voxel_dims)
        self.z = self.voxel_dims[2]
        self.factor = _upsample_factor(bev_dims or voxel_dims[:2], voxel_dims)
        out = self.z * n_classes
        self.identity = identity_projection
        if identity_projection:
            if c != out:
                raise HeadConfigError(f"identity projection needs c == Z*C, got c={c}, Z*C={out}")
            self.convs = ResidualConvStack(c, 0, rng, dtype)
            self.proj = None
            self.proj2 = None
            return
        self.convs = ResidualConvStack(c, blocks, rng, dtype)
        if hidden:
            self.proj = Linear(c, hidden, rng, dtype)
            self.proj2 = Linear(hidden, out, rng, dtype)
        else:
            self.proj = Linear(c, out, rng, dtype)
            self.proj2 = None

    def forward(self, p: Tensor, inst: Tensor | None = None) -> Tensor:
        p = _upsample(p, self.factor)
        h = self.convs(p)
        if self.proj is not None:
            with mac_label("head"):
                h = self.proj(ops.relu(h))
                if self.proj2 is not None:
                    h = self.proj2(ops.relu(h))
        return ops.reshape(h, p.shape[:2] + (self.z, self.n_classes))


def height_aware_head(p: Tensor, head: HeightAwareHead, inst: Tensor | None = None) -> Tensor:
    return head(p, inst)


def channel_to_height_head(p: Tensor, head: ChannelToHeightHead) -> Tensor:
    return head(p)


def head_parameter_count(kind: str, c: int, z: int, n_classes: int, blocks: int, hidden: int | None = None) -> int:
    conv = blocks * 2 * (9 * c * c + c)
    if kind == "height_aware":
        return conv + c * z * c + z * c + c * n_classes + n_classes
    if kind == "channel_to_height":
        out = z * n_classes
        if hidden:
            return conv + c * hidden + hidden + hidden * out + out
        return conv + c * out + out
    raise HeadConfigError(f"unknown head {kind!r}; expected one of {HEADS}")


def matched_hidden(c: int, z: int, n_classes: int) -> int:
    """Hidden width that brings the channel-to-height projection to the height-aware budget."""
    target = head_parameter_count("height_aware", c, z, n_classes, 0)
    out = z * n_classes
    # c*h + h + h*out + out = target
    return max(1, int(round((target - out) / (c + 1 + out))))


def build_head(kind: str, c: int, voxel_dims, n_classes: int, rng, dtype=np.float64, blocks: int = 2,
               bev_dims=None, instance_conditioning: bool = False, match_params: bool = True) -> Module:
    if kind == "height_aware":
        return HeightAwareHead(c, voxel_dims, n_classes, rng, dtype, blocks, bev_dims, instance_conditioning)
    if kind == "channel_to_height":
        hidden = matched_hidden(c, voxel_dims[2], n_classes) if match_params else None
        return ChannelToHeightHead(c, voxel_dims, n_classes, rng, dtype, blocks, bev_dims, hidden)
    raise HeadConfigError(f"unknown head {kind!r}; expected one of {HEADS}")


def pool_height(logits: Tensor, factor: int = 2) -> Tensor:
    """Average logits over groups of ``factor`` consecutive height slices."""
    x, y, z, c = logits.shape
    if z % factor:
        raise HeadConfigError(f"height {z} not divisible by {factor}")
    return ops.mean(ops.reshape(logits, (x, y, z // factor, factor, c)), axis=3)


# ----------------------------------------------------------------- losses

def compute_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``w_c ∝ 1/ln(1.02 + freq_c)``, mean 1; classes absent from ``labels`` get the largest weight."""
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise LabelError("cannot weight an empty label set")
    counts = np.bincount(labels, minlength=n_classes)[:n_classes].astype(np.float64)
    freq = counts / labels.size
    w = 1.0 / np.log(1.02 + freq)
    present = counts > 0
    w[~present] = w[present].max()
    return w / w.mean()


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), found range [{labels.min()}, {labels.max()}]")
    return labels


def balanced_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over voxels of ``w_y * -log softmax(logits)_y``."""
    n_classes = logits.shape[-1]
    labels = _check_labels(labels, n_classes)
    if labels.shape != logits.shape[:-1]:
        raise LabelError(f"labels {labels.shape} do not match logits {logits.shape}")
    nll = -ops.pick(ops.log_softmax(logits, axis=-1), labels)
    w = np.asarray(weights, dtype=logits.dtype)[labels]
    return ops.mean(nll * w)


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard extension for a ground-truth indicator sorted by error."""
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over classes present in ``labels`` of the Lovász-extended Jaccard loss.

    ``probs`` is ``(..., C)``; the sort permutation is treated as constant.
    """
    n_classes = probs.shape[-1]
    labels = _check_labels(labels, n_classes).reshape(-1)
    p = ops.reshape(probs, (-1, n_classes))
    losses = []
    for cls in np.unique(labels):
        fg = (labels == cls).astype(p.dtype)
        pc = p[:, int(cls)]
        err = fg + pc * (1.0 - 2.0 * fg)  # |fg - p| for fg in {0, 1}
        order = np.argsort(-err.data, kind="stable")
        grad = lovasz_grad(fg[order]).astype(p.dtype)
        losses.append(ops.sum(err[order] * grad))
    if not losses:
        return Tensor(np.zeros((), dtype=p.dtype))
    return ops.mean(ops.stack(losses))


def downsample_labels(labels: np.ndarray, factor: int, n_classes: int) -> np.ndarray:
    """Majority vote over groups of ``factor`` height slices.

    Ties go to the occupied class with the smallest id; free wins only outright.
    """
    x, y, z = labels.shape
    if z % factor:
        raise HeadConfigError(f"height {z} not divisible by {factor}")
    groups = labels.reshape(x, y, z // factor, factor)
    counts = np.stack([(groups == cls).sum(-1) for cls in range(n_classes)], axis=-1)
    order = list(range(1, n_classes)) + [0]
    pick = np.argmax(counts[..., order], axis=-1)
    return np.asarray(order)[pick].astype(labels.dtype)


def total_loss(logits_per_scale: list[Tensor], gt_per_scale: list[np.ndarray], weights: np.ndarray,
               parts: dict | None = None) -> Tensor:
    """Sum over scales of balanced CE plus Lovász-Softmax, equal scale weights."""
    if not logits_per_scale:
        raise HeadConfigError("need at least one supervision scale")
    total = None
    for s, (lg, gt) in enumerate(zip(logits_per_scale, gt_per_scale)):
        ce = balanced_cross_entropy(lg, gt, weights)
        lv = lovasz_softmax(ops.softmax(lg, axis=-1), gt)
        if parts is not None:
            parts[f"ce{s}"] = float(ce.data)
            parts[f"lovasz{s}"] = float(lv.data)
        term = ce + lv
        total = term if total is None else total + term
    return total
