"""Instance and BEV query spaces and the attention that links them.

The bidirectional block projects each space once, forms a single logit matrix
per head and normalises it twice: over BEV cells to update the instances and
over instances to update the BEV cells. The cost is therefore linear in the
number of BEV cells, whereas self-attention over the BEV grid is quadratic.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import LayerNorm, Linear, Module, Tensor, mac_label, ops
from .numerics.tensor import record_macs


class AttentionConfigError(ValueError):
    pass


# -------------------------------------------------------------- positional

def sine_pos_encoding(grid_dims: tuple[int, int], c: int) -> np.ndarray:
    """Fixed sinusoidal encoding of a 2-D grid, shape ``(rows*cols, c)``.

    The first ``c/2`` channels encode the row index and the rest the column
    index; each half interleaves ``sin``/``cos`` pairs over geometric
    frequencies ``10000^(-2k/(c/2))``. Cell ``(r, q)`` is row ``r * cols + q``.
    """
    if c % 4:
        raise AttentionConfigError(f"sine encoding needs channels divisible by 4, got {c}")
    rows, cols = grid_dims
    half = c // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half // 2) * 2.0 / half))

    def enc(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    r, q = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([enc(r.ravel()), enc(q.ravel())], axis=1)


# ----------------------------------------------------------------- types

@dataclass
class BEVQueryGrid:
    features: Tensor
    grid_dims: tuple
    pos: Tensor

    def __post_init__(self):
        nb = self.grid_dims[0] * self.grid_dims[1]
        if self.features.shape[0] != nb or self.pos.shape != self.features.shape:
            raise AttentionConfigError(
                f"BEV grid {self.grid_dims} needs {nb} rows; features {self.features.shape}, pos {self.pos.shape}")

    @property
    def n_b(self) -> int:
        return self.features.shape[0]


@dataclass
class InstanceQuerySet:
    features: Tensor
    pos: Tensor

    def __post_init__(self):
        if self.features.shape[0] < 1:
            raise AttentionConfigError("need at least one instance query")
        if self.pos.shape != self.features.shape:
            raise AttentionConfigError(f"instance pos {self.pos.shape} != features {self.features.shape}")

    @property
    def n_i(self) -> int:
        return self.features.shape[0]


@dataclass
class BiAttnWeights:
    """Per-head logits ``(h, n_i, n_b)`` and both normalisations.

    ``over_bev`` is softmax across BEV cells (rows sum to one per instance);
    ``over_inst`` is softmax across instances, stored transposed as
    ``(h, n_b, n_i)`` so that its rows also sum to one.
    """
    logits: np.ndarray
    over_bev: np.ndarray
    over_inst: np.ndarray


def _split_heads(x: Tensor, h: int) -> Tensor:
    n, c = x.shape
    return ops.transpose(ops.reshape(x, (n, h, c // h)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return ops.reshape(ops.transpose(x, (1, 0, 2)), (n, h * d))


def check_heads(c: int, h: int) -> None:
    if h < 1 or c % h:
        raise AttentionConfigError(f"channels {c} not divisible by heads {h}")


# --------------------------------------------------------- bidirectional

class IBBiXAttn(Module):
    """Bidirectional multi-head cross-attention sharing one logit matrix."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        check_heads(c, heads)
        self.c, self.heads = c, heads
        self.proj_i = Linear(c, c, rng, dtype)
        self.proj_b = Linear(c, c, rng, dtype)
        self.out_i = Linear(c, c, rng, dtype)
        self.out_b = Linear(c, c, rng, dtype)

    def forward(self, inst: InstanceQuerySet, bev: BEVQueryGrid):
        if inst.features.shape[1] != self.c or bev.features.shape[1] != self.c:
            raise AttentionConfigError(
                f"query channels {inst.features.shape[1]}/{bev.features.shape[1]} != block channels {self.c}")
        if inst.n_i >= bev.n_b:
            warnings.warn(f"instance queries ({inst.n_i}) not fewer than BEV cells ({bev.n_b})", stacklevel=2)
        h = self.heads
        d = self.c // h
        with mac_label("proj"):
            li = self.proj_i(inst.features + inst.pos)
            lb = self.proj_b(bev.features + bev.pos)
        li_h, lb_h = _split_heads(li, h), _split_heads(lb, h)
        with mac_label("attn_scores"):
            logits = ops.matmul(li_h, ops.swapaxes(lb_h, 1, 2)) * (1.0 / math.sqrt(d))
        a_bev = ops.softmax(logits, axis=2)  # (h, n_i, n_b)
        a_inst = ops.softmax(logits, axis=1)  # (h, n_i, n_b), columns sum to one
        with mac_label("attn_values"):
            v_i = ops.matmul(a_bev, lb_h)
            v_b = ops.matmul(ops.swapaxes(a_inst, 1, 2), li_h)
        with mac_label("proj"):
            inst_out = self.out_i(_merge_heads(v_i))
            bev_out = self.out_b(_merge_heads(v_b))
        weights = BiAttnWeights(logits.data, a_bev.data, np.swapaxes(a_inst.data, 1, 2))
        return inst_out, bev_out, weights


def ib_bixattn(inst: InstanceQuerySet, bev: BEVQueryGrid, block: IBBiXAttn):
    """Returns ``(inst_update, bev_update, weights)``; residuals are the caller's."""
    return block(inst, bev)


# ------------------------------------------------------- instance encoder

class InstanceEncoderLayer(Module):
    """Pre-norm Transformer encoder layer over the instance queries."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator, dtype=np.float64, ff_mult: int = 4):
        check_heads(c, heads)
        self.c, self.heads = c, heads
        self.norm1 = LayerNorm(c, dtype)
        self.q = Linear(c, c, rng, dtype)
        self.k = Linear(c, c, rng, dtype)
        self.v = Linear(c, c, rng, dtype)
        self.out = Linear(c, c, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.ff1 = Linear(c, ff_mult * c, rng, dtype)
        self.ff2 = Linear(ff_mult * c, c, rng, dtype)

    def forward(self, x: Tensor, pos: Tensor | None = None) -> Tensor:
        h = self.heads
        d = self.c // h
        y = self.norm1(x)
        qk_in = y if pos is None else y + pos
        with mac_label("proj"):
            q, k, v = _split_heads(self.q(qk_in), h), _split_heads(self.k(qk_in), h), _split_heads(self.v(y), h)
        with mac_label("attn_scores"):
            scores = ops.matmul(q, ops.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=2)
        with mac_label("attn_values"):
            ctx = ops.matmul(attn, v)
        with mac_label("proj"):
            x = x + self.out(_merge_heads(ctx))
        with mac_label("ffn"):
            x = x + self.ff2(ops.relu(self.ff1(self.norm2(x))))
        return x


def instance_encoder_layer(inst: Tensor, layer: InstanceEncoderLayer, pos: Tensor | None = None) -> Tensor:
    return layer(inst, pos)


# ------------------------------------------------------------ cost model

@dataclass(frozen=True)
class AttentionCost:
    """Multiply-add counts.

    The ``*_flops`` fields count the attention-score products (logit
    matrix entries times the channel width), the quantity the
    ``n_i*n_b + n_i*n_i << n_b*n_b`` argument is about; the logit matrix of
    the bidirectional block is formed once and shared by both directions.
    ``*_total`` fields add projections and value aggregation.
    """
    bixattn_flops: int
    inst_self_flops: int
    dense_bev_self_flops: int
    bixattn_total: int
    inst_self_total: int
    dense_bev_self_total: int

    @property
    def dense_over_bixattn(self) -> float:
        return self.dense_bev_self_flops / self.bixattn_flops


def attention_cost(n_i: int, n_b: int, c: int, h: int) -> AttentionCost:
    if min(n_i, n_b, c, h) < 1:
        raise AttentionConfigError("attention_cost arguments must be positive")
    check_heads(c, h)
    bix_scores = n_i * n_b * c
    self_scores = n_i * n_i * c
    dense_scores = n_b * n_b * c
    return AttentionCost(
        bixattn_flops=bix_scores,
        inst_self_flops=self_scores,
        dense_bev_self_flops=dense_scores,
        # two input + two output projections, two value aggregations
        bixattn_total=2 * (n_i + n_b) * c * c + bix_scores + 2 * n_i * n_b * c,
        # q, k, v, out projections, one aggregation
        inst_self_total=4 * n_i * c * c + 2 * self_scores,
        dense_bev_self_total=4 * n_b * c * c + 2 * dense_scores,
    )


def dense_self_attention_scores(x: np.ndarray, heads: int, chunk: int = 1024) -> np.ndarray:
    """Reference dense multi-head self-attention over all rows of ``x``.

    Plain numpy (no projections), processed in row chunks to bound memory.
    Counts its score and aggregation multiply-adds under the
    ``attn_scores``/``attn_values`` labels so that the bench can measure the
    dense pattern at sizes where an ``n_b x n_b`` matrix would not fit.
    """
    n, c = x.shape
    check_heads(c, heads)
    d = c // heads
    xh = x.reshape(n, heads, d).transpose(1, 0, 2)
    out = np.empty_like(xh)
    scale = 1.0 / math.sqrt(d)
    for s in range(0, n, chunk):
        q = xh[:, s:s + chunk]
        with mac_label("attn_scores"):
            logits = np.matmul(q, xh.transpose(0, 2, 1)) * scale
            record_macs(logits.size * d)
        logits -= logits.max(axis=2, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=2, keepdims=True)
        with mac_label("attn_values"):
            out[:, s:s + chunk] = np.matmul(logits, xh)
            record_macs(q.shape[1] * heads * n * d)
    return out.transpose(1, 0, 2).reshape(n, c)


# ------------------------------------------------------------- interaction

class InteractionLayer(Module):
    """Pre-norm bidirectional attention with residuals, then instance self-attention.

    The BEV positional encoding is fixed and passed in; the instance one is a
    learnable parameter owned by the caller.
    """

    def __init__(self, c: int, heads: int, rng: np.random.Generator, dtype=np.float64, residual: bool = True):
        self.norm_i = LayerNorm(c, dtype)
        self.norm_b = LayerNorm(c, dtype)
        self.bix = IBBiXAttn(c, heads, rng, dtype)
        self.encoder = InstanceEncoderLayer(c, heads, rng, dtype)
        self.residual = residual
        self.last_weights: BiAttnWeights | None = None

    def forward(self, inst: Tensor, inst_pos: Tensor, bev: Tensor, bev_pos: Tensor, grid_dims):
        iq = InstanceQuerySet(self.norm_i(inst), inst_pos)
        bq = BEVQueryGrid(self.norm_b(bev), grid_dims, bev_pos)
        di, db, self.last_weights = self.bix(iq, bq)
        if self.residual:
            inst, bev = inst + di, bev + db
        else:
            inst, bev = di, db
        return self.encoder(inst, inst_pos), bev
