"""The finite-difference gradient suite run by ``bevocc gradcheck`` and the acceptance tests.

Every case builds a scalar function of float64 inputs. Inputs are drawn away
from kinks (ReLU zero, bilinear cell edges) so that central differences are
meaningful; Lovász sort order is kept tie-free by construction.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import geometry, occ_head, temporal
from . import attention as attn
from .numerics import Tensor, grad_check_report, ops
from .numerics.gradcheck import GradCheckError

THRESHOLD = 1e-4


@dataclass
class CaseResult:
    module: str
    name: str
    max_rel_error: float
    checked: int
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _differentiable(module) -> list:
    """Parameters minus key biases, whose gradient is identically zero (softmax shift invariance)."""
    return [p for name, p in module.named_parameters() if not name.endswith("k.bias")]


def _jitter_biases(module, rng) -> None:
    """Zero-initialised biases put exact zeros in front of ReLUs (a kink); move them off it."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _op_cases(rng):
    def mk(shape, lo=-1.0, hi=1.0):
        return _t(rng.uniform(lo, hi, size=shape))

    def away(shape, lo=0.2, hi=1.0):
        # magnitudes bounded away from zero for kinked ops
        return _t(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape))

    def w(shape):
        return rng.normal(size=shape)

    c = {}
    a, b, k = mk((3, 4)), mk((4,)), w((3, 4))
    c["add"] = (lambda: ops.sum(ops.add(a, b) * k)), [a, b]
    a2, b2, k2 = mk((2, 3)), mk((2, 1)), w((2, 3))
    c["sub"] = (lambda: ops.sum(ops.sub(a2, b2) * k2)), [a2, b2]
    a3, b3, k3 = mk((3, 2)), mk((1, 2)), w((3, 2))
    c["mul"] = (lambda: ops.sum(ops.mul(a3, b3) * k3)), [a3, b3]
    a4, b4, k4 = mk((3, 2)), mk((3, 2), 0.5, 2.0), w((3, 2))
    c["div"] = (lambda: ops.sum(ops.div(a4, b4) * k4)), [a4, b4]
    a5, b5, k5 = mk((2, 3, 4)), mk((4, 5)), w((2, 3, 5))
    c["matmul"] = (lambda: ops.sum(ops.matmul(a5, b5) * k5)), [a5, b5]
    x6, w6, b6, k6 = mk((2, 3, 4)), mk((4, 2)), mk((2,)), w((2, 3, 2))
    c["linear"] = (lambda: ops.sum(ops.linear(x6, w6, b6) * k6)), [x6, w6, b6]
    a7, k7 = mk((3, 4, 2)), w((3, 2))
    c["sum"] = (lambda: ops.sum(ops.sum(a7, axis=1) * k7)), [a7]
    c["mean"] = (lambda: ops.mean(a7 * a7)), [a7]
    a8, k8 = mk((2, 3, 4)), w((4, 6))
    c["reshape"] = (lambda: ops.sum(ops.reshape(a8, (4, 6)) * k8)), [a8]
    c["transpose"] = (lambda: ops.sum(ops.reshape(ops.transpose(a8, (2, 0, 1)), (4, 6)) * k8)), [a8]
    c["swapaxes"] = (lambda: ops.sum(ops.reshape(ops.swapaxes(a8, 0, 2), (4, 6)) * k8)), [a8]
    a9, k9 = mk((3, 1)), w((2, 3, 4))
    c["broadcast_to"] = (lambda: ops.sum(ops.broadcast_to(a9, (2, 3, 4)) * k9)), [a9]
    a10, k10, idx10 = mk((5, 3)), w((4, 2)), np.array([0, 2, 2, 4])
    c["getitem"] = (lambda: ops.sum(ops.getitem(a10, (idx10, slice(1, None))) * k10)), [a10]
    a11, k11, idx11 = mk((4, 3)), w(4), np.array([0, 2, 1, 2])
    c["pick"] = (lambda: ops.sum(ops.pick(a11, idx11) * k11)), [a11]
    a12, b12, k12 = mk((2, 3)), mk((1, 3)), w((3, 3))
    c["concat"] = (lambda: ops.sum(ops.concat([a12, b12], 0) * k12)), [a12, b12]
    k12b = w((2, 2, 3))
    c["stack"] = (lambda: ops.sum(ops.stack([a12, a12 * b12], 0) * k12b)), [a12, b12]
    a13, k13, seg13 = mk((6, 2)), w((3, 2)), np.array([0, 2, 0, 1, 2, 2])
    c["segment_sum"] = (lambda: ops.sum(ops.segment_sum(a13, seg13, 3) * k13)), [a13]
    a14, k14 = mk((4,), 0.5, 2.0), w(4)
    c["exp"] = (lambda: ops.sum(ops.exp(a14) * k14)), [a14]
    c["log"] = (lambda: ops.sum(ops.log(a14) * k14)), [a14]
    c["sqrt"] = (lambda: ops.sum(ops.sqrt(a14) * k14)), [a14]
    a15, k15 = mk((5,), -2, 2), w(5)
    c["tanh"] = (lambda: ops.sum(ops.tanh(a15) * k15)), [a15]
    c["sigmoid"] = (lambda: ops.sum(ops.sigmoid(a15) * k15)), [a15]
    a16, k16 = away((6,)), w(6)
    c["relu"] = (lambda: ops.sum(ops.relu(a16) * k16)), [a16]
    a17, k17 = mk((3, 4), -3, 3), w((3, 4))
    c["softmax"] = (lambda: ops.sum(ops.softmax(a17, axis=0) * k17)), [a17]
    c["log_softmax"] = (lambda: ops.sum(ops.log_softmax(a17, axis=-1) * k17)), [a17]
    a18, k18 = mk((2, 3, 4), -2, 2), w((2, 3, 4))
    c["normalize"] = (lambda: ops.sum(ops.normalize(a18, axis=(-2, -1)) * k18)), [a18]
    a19, g19, b19, k19 = mk((3, 5)), mk((5,)), mk((5,)), w((3, 5))
    c["layer_norm"] = (lambda: ops.sum(ops.layer_norm(a19, g19, b19) * k19)), [a19, g19, b19]
    x20, w20, b20, k20 = mk((4, 5, 2)), mk((3, 3, 2, 3)), mk((3,)), w((4, 5, 3))
    c["conv2d"] = (lambda: ops.sum(ops.conv2d(x20, w20, b20) * k20)), [x20, w20, b20]
    fm = mk((2, 5, 6, 3))
    u = _t(rng.integers(0, 5, size=7) + rng.uniform(0.1, 0.9, size=7))
    v = _t(rng.integers(0, 4, size=7) + rng.uniform(0.1, 0.9, size=7))
    idx21, k21 = rng.integers(0, 2, size=7), w((7, 3))
    c["bilinear_sample"] = (lambda: ops.sum(ops.bilinear_sample(fm, u, v, idx21) * k21)), [fm, u, v]
    return [("numerics", name, fn, inputs, {}) for name, (fn, inputs) in c.items()]


def _geometry_cases(rng):
    pts = _t(rng.uniform(-3, 3, size=(6, 3)))
    past = geometry.EgoPose.from_xy_yaw(1.0, -0.5, 0.3)
    cur = geometry.EgoPose.from_xy_yaw(0.2, 0.4, -0.2)
    k = rng.normal(size=(6, 3))

    def transform():
        return ops.sum(geometry.transform_to_frame(pts, past.world_to_ego(), cur.world_to_ego()) * k)

    cam = geometry.look_camera(0.0, (0.0, 0.0, 1.0), (32, 16), 70.0)
    front = _t(np.column_stack([rng.uniform(3, 6, 5), rng.uniform(-1, 1, 5), rng.uniform(0.5, 1.5, 5)]))
    ku = rng.normal(size=5)

    def project():
        proj = geometry.project_to_view(front, cam)
        return ops.sum(proj.u * ku) + ops.sum(proj.v * ku[::-1].copy())

    return [("geometry", "transform_to_frame", transform, [pts], {}),
            ("geometry", "project_to_view", project, [front], {})]


def _attention_cases(rng):
    c, h, n_i, n_b = 8, 2, 3, 12
    block = attn.IBBiXAttn(c, h, rng)
    fi, fb = _t(rng.normal(size=(n_i, c))), _t(rng.normal(size=(n_b, c)))
    pi = _t(rng.normal(size=(n_i, c)) * 0.1)
    pb = attn.sine_pos_encoding((3, 4), c)
    ki, kb = rng.normal(size=(n_i, c)), rng.normal(size=(n_b, c))

    def bix():
        di, db, _ = block(attn.InstanceQuerySet(fi, pi), attn.BEVQueryGrid(fb, (3, 4), pb))
        return ops.sum(di * ki) + ops.sum(db * kb)

    enc = attn.InstanceEncoderLayer(c, h, rng)

    def encoder():
        return ops.sum(enc(fi, pi) * ki)

    layer = attn.InteractionLayer(c, h, rng)

    def interaction():
        a, b = layer(fi, pi, fb, Tensor(pb), (3, 4))
        return ops.sum(a * ki) + ops.sum(b * kb)

    return [("attention", "ib_bixattn", bix, [fi, fb, pi] + block.parameters(), {}),
            ("attention", "instance_encoder_layer", encoder, [fi, pi] + _differentiable(enc), {"max_coords": 40}),
            ("attention", "interaction_layer", interaction, [fi, fb, pi] + _differentiable(layer), {"max_coords": 30})]


def _temporal_cases(rng):
    c, k, m = 8, 2, 2
    anchors = temporal.BEVAnchor.grid((2, 2), 1.0, 2.0, -1.0, 0.0, 2.0)
    anchors = anchors.with_height(_t(np.full(4, 1.5)))
    head = temporal.OffsetHead(c, k, m, rng)
    q = _t(rng.normal(size=(4, c)))
    kp = rng.normal(size=(4, k, m, 3))

    def sampling():
        return ops.sum(temporal.generate_sampling_points(q, anchors, head) * kp)

    cams = [geometry.look_camera(0.0, (0.0, 0.0, 1.0), (24, 16), 80.0),
            geometry.look_camera(0.6, (0.0, 0.0, 1.0), (24, 16), 80.0)]
    poses = [geometry.EgoPose.identity(), geometry.EgoPose.from_xy_yaw(-0.4, 0.1, 0.05)]
    fmaps = _t(rng.normal(size=(2, 2, 16, 24, 3)))
    pts = _t(np.column_stack([rng.uniform(3, 5, 6), rng.uniform(-1, 1, 6), rng.uniform(0.3, 1.5, 6)])
             .reshape(3, 2, 1, 3))
    kg = rng.normal(size=(3, 2, 3))

    def gather():
        return ops.sum(temporal.gather_temporal_features(pts, poses, cams, fmaps).O * kg)

    o = _t(rng.normal(size=(3, 4, 5)))
    kd = rng.normal(size=(3, 4, 5))

    def ddn():
        return ops.sum(temporal.ddn(o) * kd)

    mixer = temporal.MLPMix(4, 5, 6, rng)
    km = rng.normal(size=(3, 6))
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 1, 1]], bool)

    def mix():
        return ops.sum(mixer(o, mask) * km)

    refiner = temporal.HeightRefiner(c, 4.0, rng)
    kr = rng.normal(size=4)

    def refine():
        return ops.sum(refiner(q, anchors).h * kr)

    return [("temporal", "generate_sampling_points", sampling, [q] + head.parameters(), {}),
            ("temporal", "gather_temporal_features", gather, [pts, fmaps], {"max_coords": 60}),
            ("temporal", "ddn", ddn, [o], {}),
            ("temporal", "mlp_mix", mix, [o] + mixer.parameters(), {"max_coords": 30}),
            ("temporal", "refine_height", refine, [q] + refiner.parameters(), {})]


def _occ_cases(rng):
    c, dims, n_cls = 4, (4, 4, 2), 3
    p = _t(rng.normal(size=(2, 2, c)))
    inst = _t(rng.normal(size=(3, c)))
    ha = occ_head.HeightAwareHead(c, dims, n_cls, rng, bev_dims=(2, 2), instance_conditioning=True)
    ha.cond.v.weight.data[:] = rng.normal(size=ha.cond.v.weight.shape) * 0.5
    ch = occ_head.ChannelToHeightHead(c, dims, n_cls, rng, bev_dims=(2, 2), hidden=5)
    _jitter_biases(ha, rng)
    _jitter_biases(ch, rng)
    kv = rng.normal(size=dims + (n_cls,))

    def height_aware():
        return ops.sum(ha(p, inst) * kv)

    def channel_to_height():
        return ops.sum(ch(p) * kv)

    logits = _t(rng.normal(size=(4, 3, 2, n_cls)))
    labels = rng.integers(0, n_cls, size=(4, 3, 2))
    weights = occ_head.compute_class_weights(labels, n_cls)

    def ce():
        return occ_head.balanced_cross_entropy(logits, labels, weights)

    def lovasz():
        return occ_head.lovasz_softmax(ops.softmax(logits, axis=-1), labels)

    def loss():
        lg = [logits, occ_head.pool_height(logits, 2)]
        return occ_head.total_loss(lg, [labels, occ_head.downsample_labels(labels, 2, n_cls)], weights)

    return [("occ_head", "height_aware_head", height_aware, [p, inst] + _differentiable(ha), {"max_coords": 25}),
            ("occ_head", "channel_to_height_head", channel_to_height, [p] + ch.parameters(), {"max_coords": 25}),
            ("occ_head", "balanced_cross_entropy", ce, [logits], {}),
            ("occ_head", "lovasz_softmax", lovasz, [logits], {}),
            ("occ_head", "total_loss", loss, [logits], {})]


def micro_scene(seed: int = 0):
    """A 4x4x2 scene with two frames and two cameras."""
    from .scene_gen import SceneConfig, generate_scene
    # steep wide cameras so that every pillar is seen; an unseen pillar feeds exact zeros into ReLU
    cfg = SceneConfig(grid_dims=(4, 4, 2), voxel_size=1.0, z_min=-1.0, frames=2, cameras=4, image_size=(12, 8),
                      hfov_deg=100.0, camera_pitch_deg=40.0, c_img=4, boxes=(0, 0), occupancy_band=(0.0, 1.0))
    return generate_scene(seed, cfg)


def micro_model_case(seed: int = 0):
    from .model import InstanceBEV, ModelConfig, SceneGeometry, supervision
    scene = micro_scene(seed)
    # a box-like blob of class 2 so that the loss sees three classes
    scene.gt.labels[1:3, 1:3, 1] = 2
    cfg = ModelConfig(channels=8, heads=2, instance_queries=3, layers=2, frames=2, points_per_frame=2,
                      dtype="float64", seed=seed)
    model = InstanceBEV(cfg, SceneGeometry.of(scene))
    _jitter_biases(model, np.random.default_rng(seed + 1))
    weights = occ_head.compute_class_weights(scene.gt.labels, scene.class_count)
    gts = supervision(scene.gt.labels, scene.class_count)

    def f():
        out = model.forward(scene)
        return occ_head.total_loss(out.logits, gts, weights)

    return f, _differentiable(model)


def all_cases(rng=None):
    rng = rng or np.random.default_rng(0)
    cases = []
    for builder in (_op_cases, _geometry_cases, _attention_cases, _temporal_cases, _occ_cases):
        cases.extend(builder(rng))
    f, params = micro_model_case()
    cases.append(("model_pipeline", "end_to_end_micro", f, params, {"max_coords": 8}))
    return cases


def run_suite(seed: int = 0, eps: float = 1e-6) -> list[CaseResult]:
    results = []
    for module, name, fn, inputs, kw in all_cases(np.random.default_rng(seed)):
        t0 = time.perf_counter()
        try:
            rep = grad_check_report(fn, inputs, eps=eps, seed=seed, **kw)
            res = CaseResult(module, name, rep.max_rel_error, rep.checked, 0.0,
                             f"input {rep.worst_input} at {rep.worst_index}: analytic {rep.analytic:.6g}, "
                             f"numeric {rep.numeric:.6g}")
        except (GradCheckError, FloatingPointError, ValueError) as exc:
            res = CaseResult(module, name, math.inf, 0, 0.0, str(exc))
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def worst_per_module(results: list[CaseResult]) -> dict[str, CaseResult]:
    worst: dict[str, CaseResult] = {}
    for r in results:
        if r.module not in worst or r.max_rel_error > worst[r.module].max_rel_error:
            worst[r.module] = r
    return worst
