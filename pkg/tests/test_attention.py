import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.attention import (
    AttentionConfigError,
    BEVQueryGrid,
    IBBiXAttn,
    InstanceEncoderLayer,
    InstanceQuerySet,
    InteractionLayer,
    attention_cost,
    dense_self_attention_scores,
    ib_bixattn,
    sine_pos_encoding,
)
from bevocc.numerics import Tensor, count_macs, grad_check, ops
from oracles import np_softmax, naive_bidirectional, randomize_biases


def _queries(rng, n_i, n_b, c, grid=None):
    grid = grid or (1, n_b)
    inst = InstanceQuerySet(Tensor(rng.normal(size=(n_i, c))), Tensor(rng.normal(size=(n_i, c))))
    bev = BEVQueryGrid(Tensor(rng.normal(size=(n_b, c))), grid, Tensor(rng.normal(size=(n_b, c))))
    return inst, bev


# ------------------------------------------------------------- encoding

def test_sine_encoding_origin_cell():
    pe = sine_pos_encoding((4, 4), 16)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_sine_encoding_deterministic_and_bounded():
    a, b = sine_pos_encoding((6, 5), 32), sine_pos_encoding((6, 5), 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (30, 32)
    assert np.abs(a).max() <= 1.0


def test_sine_encoding_distinct_cells():
    pe = sine_pos_encoding((8, 8), 16)
    for i, j in itertools.combinations(range(64), 2):
        assert np.linalg.norm(pe[i] - pe[j]) > 0


def test_sine_encoding_rejects_bad_channels():
    with pytest.raises(AttentionConfigError):
        sine_pos_encoding((4, 4), 18)


# -------------------------------------------------------- bidirectional

def test_degenerate_single_query_each_side():
    rng = np.random.default_rng(0)
    block = IBBiXAttn(4, 1, rng)
    randomize_biases(block, rng)
    inst, bev = _queries(rng, 1, 1, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        oi, ob, w = ib_bixattn(inst, bev, block)
    assert w.over_bev[0, 0, 0] == 1.0 and w.over_inst[0, 0, 0] == 1.0
    li = block.proj_i(inst.features + inst.pos)
    lb = block.proj_b(bev.features + bev.pos)
    np.testing.assert_allclose(oi.data, block.out_i(lb).data, atol=1e-14)
    np.testing.assert_allclose(ob.data, block.out_b(li).data, atol=1e-14)


def test_matches_naive_oracle_hand_sizes():
    rng = np.random.default_rng(1)
    block = IBBiXAttn(4, 2, rng)
    randomize_biases(block, rng)
    inst, bev = _queries(rng, 3, 5, 4)
    oi, ob, _ = block(inst, bev)
    ri, rb = naive_bidirectional(block, inst.features.data, inst.pos.data, bev.features.data, bev.pos.data)
    assert np.abs(oi.data - ri).max() <= 1e-10
    assert np.abs(ob.data - rb).max() <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.sampled_from([(4, 1), (4, 2), (8, 2), (8, 4), (12, 3)]),
       st.integers(0, 2**31 - 1))
def test_matches_naive_oracle_random(n_i, n_b, ch, seed):
    c, h = ch
    rng = np.random.default_rng(seed)
    block = IBBiXAttn(c, h, rng)
    randomize_biases(block, rng)
    inst, bev = _queries(rng, n_i, n_b, c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        oi, ob, _ = block(inst, bev)
    ri, rb = naive_bidirectional(block, inst.features.data, inst.pos.data, bev.features.data, bev.pos.data)
    assert np.abs(oi.data - ri).max() <= 1e-10
    assert np.abs(ob.data - rb).max() <= 1e-10


def test_instance_permutation():
    rng = np.random.default_rng(2)
    block = IBBiXAttn(8, 2, rng)
    randomize_biases(block, rng)
    inst, bev = _queries(rng, 5, 7, 8)
    perm = rng.permutation(5)
    inst_p = InstanceQuerySet(Tensor(inst.features.data[perm]), Tensor(inst.pos.data[perm]))
    oi, ob, _ = block(inst, bev)
    pi, pb, _ = block(inst_p, bev)
    assert np.abs(pi.data - oi.data[perm]).max() <= 1e-10
    assert np.abs(pb.data - ob.data).max() <= 1e-10


def test_softmaxes_row_stochastic():
    rng = np.random.default_rng(3)
    block = IBBiXAttn(16, 4, rng)
    inst, bev = _queries(rng, 6, 20, 16, (4, 5))
    _, _, w = block(inst, bev)
    assert w.logits.shape == (4, 6, 20)
    for a in (w.over_bev, w.over_inst):
        assert a.min() >= 0
        assert np.abs(a.sum(axis=-1) - 1).max() <= 1e-6


def test_logit_shift_invariance():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(2, 3, 5)))
    for axis in (1, 2):
        a = ops.softmax(logits, axis).data
        b = ops.softmax(logits + 123.25, axis).data
        assert np.abs(a - b).max() <= 1e-9


def test_grad_flows_through_both_softmaxes():
    rng = np.random.default_rng(5)
    block = IBBiXAttn(4, 2, rng)
    randomize_biases(block, rng)
    inst, bev = _queries(rng, 3, 5, 4)
    inst.features.requires_grad = bev.features.requires_grad = True
    wi, wb = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))

    def f():
        oi, ob, _ = block(inst, bev)
        return ops.sum(oi * wi) + ops.sum(ob * wb)

    params = [block.proj_i.weight, block.proj_b.weight, inst.features, bev.features]
    assert grad_check(f, params) < 1e-4


def test_head_mismatch_rejected():
    with pytest.raises(AttentionConfigError):
        IBBiXAttn(10, 4, np.random.default_rng(0))


def test_warns_when_instances_not_fewer():
    rng = np.random.default_rng(6)
    block = IBBiXAttn(4, 1, rng)
    inst, bev = _queries(rng, 4, 4, 4)
    with pytest.warns(UserWarning):
        block(inst, bev)


def test_grid_shape_checked():
    with pytest.raises(AttentionConfigError):
        BEVQueryGrid(Tensor(np.zeros((5, 4))), (2, 3), Tensor(np.zeros((5, 4))))


# ------------------------------------------------------ instance encoder

def test_encoder_single_query_is_residual_mlp():
    rng = np.random.default_rng(7)
    layer = InstanceEncoderLayer(8, 2, rng)
    randomize_biases(layer, rng)
    x = Tensor(rng.normal(size=(1, 8)))
    y = layer(x)
    # with one query the attention weight is 1, so the context is v(norm1(x))
    v = layer.v(layer.norm1(x))
    mid = x.data + layer.out(v).data
    ff = layer.ff2(ops.relu(layer.ff1(layer.norm2(Tensor(mid))))).data
    np.testing.assert_allclose(y.data, mid + ff, atol=1e-12)


def test_encoder_permutation_equivariant():
    rng = np.random.default_rng(8)
    layer = InstanceEncoderLayer(8, 2, rng)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    a = layer(Tensor(x)).data
    b = layer(Tensor(x[perm])).data
    assert np.abs(b - a[perm]).max() <= 1e-12


def test_encoder_grad_check():
    rng = np.random.default_rng(9)
    layer = InstanceEncoderLayer(8, 2, rng)
    randomize_biases(layer, rng)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w = rng.normal(size=(4, 8))
    params = [x, layer.q.weight, layer.v.weight, layer.ff1.weight, layer.norm1.gamma]
    assert grad_check(lambda: ops.sum(layer(x) * w), params) < 1e-4


def test_four_layer_stack_grad_check():
    rng = np.random.default_rng(10)
    layers = [InteractionLayer(8, 2, rng) for _ in range(4)]
    for lay in layers:
        randomize_biases(lay, rng)
    inst = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    inst_pos = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    bev = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
    bev_pos = Tensor(sine_pos_encoding((4, 4), 8))
    wi, wb = rng.normal(size=(4, 8)), rng.normal(size=(16, 8))

    def f():
        i, b = inst, bev
        for lay in layers:
            i, b = lay(i, inst_pos, b, bev_pos, (4, 4))
        return ops.sum(i * wi) + ops.sum(b * wb)

    params = [inst, inst_pos, bev, layers[0].bix.proj_b.weight, layers[3].encoder.ff2.weight]
    assert grad_check(f, params, max_coords=40) < 1e-4


# ----------------------------------------------------------------- cost

def test_cost_linear_in_bev_cells():
    base = [attention_cost(200, nb, 128, 8).bixattn_flops for nb in (1000, 2000, 5000)]
    diffs = {attention_cost(200, 2 * nb, 128, 8).bixattn_flops - 2 * attention_cost(200, nb, 128, 8).bixattn_flops
             for nb in (1000, 2000, 5000)}
    assert len(diffs) == 1
    assert base[1] > base[0]


def test_cost_dense_quadratic():
    r = [attention_cost(10, 2 * nb, 16, 4).dense_bev_self_flops / attention_cost(10, nb, 16, 4).dense_bev_self_flops
         for nb in (100, 1000, 10000)]
    assert abs(r[-1] - 4) < 1e-9


def test_cost_ratio_at_full_grid():
    cost = attention_cost(200, 10000, 128, 8)
    # 10000^2 / (200 * 10000) = 50
    assert cost.dense_over_bixattn == pytest.approx(50.0)
    assert cost.dense_over_bixattn > 40


def test_measured_score_macs_match_closed_form_and_are_linear():
    rng = np.random.default_rng(11)
    n_i, c, h = 8, 16, 4
    block = IBBiXAttn(c, h, rng)
    sizes = [256, 1024, 4096, 16384]
    measured = []
    for nb in sizes:
        inst, bev = _queries(rng, n_i, nb, c)
        with count_macs() as counter:
            block(inst, bev)
        measured.append(counter.counts["attn_scores"])
        cost = attention_cost(n_i, nb, c, h)
        assert counter.counts["attn_scores"] == cost.bixattn_flops
        assert counter.total() == cost.bixattn_total
    slope, icpt = np.polyfit(sizes, measured, 1)
    pred = slope * np.array(sizes) + icpt
    r2 = 1 - np.sum((measured - pred) ** 2) / np.sum((measured - np.mean(measured)) ** 2)
    assert r2 > 0.999


def test_dense_kernel_matches_direct_and_counts():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(50, 8))
    with count_macs() as counter:
        out = dense_self_attention_scores(x, 2, chunk=16)
    assert counter.counts["attn_scores"] == attention_cost(1, 50, 8, 2).dense_bev_self_flops
    ref = []
    for k in range(2):
        xs = x[:, 4 * k:4 * k + 4]
        ref.append(np_softmax(xs @ xs.T / 2.0, 1) @ xs)
    np.testing.assert_allclose(out, np.concatenate(ref, 1), atol=1e-12)
