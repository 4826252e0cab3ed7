"""End-to-end acceptance checks. Each test records one PASS/FAIL line, printed in the pytest summary."""
import csv
import itertools
import time
import warnings

import numpy as np
import pytest

from bevocc import cli
from bevocc.ablation import run_head_ablation
from bevocc.attention import BEVQueryGrid, IBBiXAttn, InstanceQuerySet
from bevocc.gradsuite import THRESHOLD, run_suite
from bevocc.model import load_state, save_state
from bevocc.numerics import Tensor
from bevocc.occ_head import OccupancyGrid, lovasz_softmax
from bevocc.rayiou import cast_ray, evaluate_thresholds
from bevocc.scene_gen import generate_scene, load_scene, save_scene
from bevocc.temporal import ddn
from oracles import (
    fine_march,
    lovasz_extension_by_permutations,
    lovasz_oracle,
    naive_bidirectional,
    random_grid,
    random_rays,
    randomize_biases,
)

DESK_STEPS = 400
ABLATION_STEPS = 300
ABLATION_SEEDS = (0, 1, 2)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [f"{r.module}.{r.name}" for r in results if not r.passed]
    ok = not failed and dt < 300 and any(r.name == "end_to_end_micro" for r in results)
    verdict(1, ok, f"{len(results) - len(failed)}/{len(results)} ops below {THRESHOLD:g}, worst "
                   f"{worst.module}.{worst.name} {worst.max_rel_error:.2e}, {dt:.0f} s" +
            (f", failed {failed}" if failed else ""))
    assert ok


def test_bidirectional_attention_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst, configs = 0.0, 0
    for _ in range(120):
        h = int(rng.choice([1, 2, 4]))
        c = h * int(rng.integers(1, 5))
        n_i, n_b = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        block = IBBiXAttn(c, h, rng)
        randomize_biases(block, rng)
        inst = InstanceQuerySet(Tensor(rng.normal(size=(n_i, c))), Tensor(rng.normal(size=(n_i, c))))
        bev = BEVQueryGrid(Tensor(rng.normal(size=(n_b, c))), (1, n_b), Tensor(rng.normal(size=(n_b, c))))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            oi, ob, _ = block(inst, bev)
        ri, rb = naive_bidirectional(block, inst.features.data, inst.pos.data, bev.features.data, bev.pos.data)
        worst = max(worst, np.abs(oi.data - ri).max(), np.abs(ob.data - rb).max())
        configs += 1
    ok = configs >= 100 and worst < 1e-10
    verdict(2, ok, f"{configs} configurations, max abs deviation {worst:.2e}")
    assert ok


def _r2(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))


def test_complexity_trend(verdict, tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["n_i", "n_b", "bixattn_flops", "dense_flops", "measured_ns"]
    t = {(int(r[0]), int(r[1])): (float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]}
    ni = sorted({k[0] for k in t})
    nb = np.array(sorted({k[1] for k in t}), dtype=float)
    r2 = min(_r2(nb, np.array([t[(i, int(b))][0] for b in nb])) for i in ni)
    slope = np.polyfit(np.log(nb), np.log([t[(ni[0], int(b))][1] for b in nb]), 1)[0]
    flops_monotone = all(t[(a, int(b))][0] < t[(c, int(b))][0] for a, c in zip(ni, ni[1:]) for b in nb)
    big = int(nb[-1])
    times = [t[(i, big)][2] for i in ni]
    time_monotone = all(a < b for a, b in zip(times, times[1:]))
    ok = r2 > 0.999 and abs(slope - 2.0) <= 0.05 and flops_monotone and time_monotone
    verdict(3, ok, f"bixattn R2 {r2:.6f} over n_b {int(nb[0])}..{big}, dense log-log slope {slope:.4f}, "
                   f"cost monotone in n_i: flops {flops_monotone}, time@{big} {time_monotone} "
                   f"({', '.join(f'{x / 1e6:.1f}' for x in times)} ms)")
    assert ok


def test_rayiou_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches, identical_ok, monotone_ok = 0, True, True
    for _ in range(20):
        grid = random_grid(rng, n=8)
        rays = random_rays(rng, grid, 200)
        for i in range(len(rays)):
            r = rays[i]
            got = cast_ray(grid, r)
            d_ref, c_ref, _ = fine_march(grid, r.origin, r.direction)
            if c_ref != got.class_id or (c_ref >= 0 and abs(d_ref - got.depth) >= grid.voxel_size / 500):
                mismatches += 1
        same = evaluate_thresholds(grid, grid, rays, 4)
        identical_ok &= all(res.mean == 1.0 for res in same)
        flips = rng.uniform(size=grid.labels.shape) < 0.1
        noisy = np.where(flips, rng.integers(0, 4, size=grid.labels.shape), grid.labels)
        res = evaluate_thresholds(OccupancyGrid(noisy, grid.voxel_size, grid.origin), grid, rays, 4)
        for a, b in zip(res, res[1:]):
            seen = ~np.isnan(a.per_class)
            monotone_ok &= bool((a.per_class[seen] <= b.per_class[seen]).all())
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and identical_ok and monotone_ok and dt < 60
    verdict(4, ok, f"4000 rays x 20 grids, {mismatches} oracle mismatches, identical mIoU 1.0: {identical_ok}, "
                   f"IoU@1<=@2<=@4: {monotone_ok}, {dt:.1f} s")
    assert ok


def test_lovasz_oracle(verdict):
    levels = np.array([0.0, 0.2, 0.45, 0.7, 1.0])
    worst, instances = 0.0, 0
    for n in range(1, 5):
        for labels in itertools.product((0, 1), repeat=n):
            labels = np.array(labels)
            for p1 in itertools.product(levels, repeat=n):
                p1 = np.array(p1)
                probs = np.stack([1 - p1, p1], axis=1)
                got = lovasz_softmax(Tensor(probs), labels).item()
                worst = max(worst, abs(got - lovasz_oracle(probs, labels, lovasz_extension_by_permutations)))
                instances += 1
    perfect = max(lovasz_softmax(Tensor(np.eye(2)[np.array(lab)]), np.array(lab)).item()
                  for n in range(1, 5) for lab in itertools.product((0, 1), repeat=n))
    ok = worst <= 1e-9 and perfect == 0.0
    verdict(5, ok, f"{instances} binary instances (n<=4), max deviation {worst:.2e}, perfect loss {perfect}")
    assert ok


def test_ddn_contract(verdict):
    rng = np.random.default_rng(11)
    worst_mean = worst_var = 0.0
    count = 0
    while count < 1000:
        n, c = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        if n * c < 2:
            continue
        x = rng.normal(size=(n, c)) * np.exp(rng.uniform(np.log(0.5), np.log(100))) + rng.uniform(-50, 50)
        if x.var() < 0.1:
            continue
        y = ddn(Tensor(x)).data
        worst_mean = max(worst_mean, abs(y.mean()))
        worst_var = max(worst_var, abs(y.var() - 1.0))
        count += 1
    ok = worst_mean < 1e-6 and worst_var < 1e-4
    verdict(6, ok, f"{count} inputs, max |mean| {worst_mean:.2e}, max |var-1| {worst_var:.2e}")
    assert ok


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert cli.main(["synth", "--seed", "0", "--count", "4", "--out", str(root / "data")]) == 0
    runs = []
    for k in range(2):
        t0 = time.perf_counter()
        code = cli.main(["train", "--data", str(root / "data"), "--out", str(root / f"run{k}"),
                         "--steps", str(DESK_STEPS), "--deterministic"])
        assert code == 0
        runs.append(time.perf_counter() - t0)
    assert cli.main(["eval", "--checkpoint", str(root / "run0" / "checkpoint"), "--data", str(root / "data"),
                     "--out", str(root / "eval")]) == 0
    return root, runs


@pytest.mark.slow
def test_desk_scale_learning(desk, verdict):
    root, seconds = desk
    scenes = read_csv(root / "eval" / "scenes.csv")[1:]
    acc = float(np.mean([float(r[2]) for r in scenes]))
    table = read_csv(root / "eval" / "rayiou.csv")
    ray = float(next(r for r in table if r[0] == "RayIoU")[1])
    same = (root / "run0" / "loss.csv").read_bytes() == (root / "run1" / "loss.csv").read_bytes()
    ok = acc >= 0.9 and ray >= 0.6 and max(seconds) < 1800 and same
    verdict(7, ok, f"{DESK_STEPS} steps on 4 scenes: voxel accuracy {acc:.4f}, RayIoU {ray:.4f}, "
                   f"train {max(seconds):.0f} s, loss CSV identical across runs: {same}")
    assert ok


@pytest.mark.slow
def test_head_ablation(verdict, tmp_path):
    train_scenes = [generate_scene(s) for s in range(4)]
    held_out = [generate_scene(s) for s in range(4, 8)]
    report = run_head_ablation(train_scenes, held_out, seeds=ABLATION_SEEDS, steps=ABLATION_STEPS)
    paths = report.write(tmp_path)
    ha, ch = report.mean("height_aware"), report.mean("channel_to_height")
    params = {r.head: r.params for r in report.runs}
    budget = abs(params["height_aware"] - params["channel_to_height"]) / params["height_aware"]
    written = all(p.exists() and p.stat().st_size > 0 for p in paths)
    ok = ha >= ch and budget < 0.02 and written
    per_seed = ", ".join(f"{r.head}/{r.seed} {r.rayiou:.4f}" for r in report.runs)
    verdict(8, ok, f"held-out mean RayIoU height_aware {ha:.4f} vs channel_to_height {ch:.4f} "
                   f"(params {params['height_aware']} vs {params['channel_to_height']}; {per_seed})")
    assert ok


@pytest.mark.slow
def test_anchor_discipline(desk, verdict):
    root, _ = desk
    scene = load_scene(root / "data" / "scene_000.scene")
    state = load_state(root / "run0" / "checkpoint", scene)
    init = state.model.initial_anchors()
    fixed = in_range = True
    for k in range(4):
        out = state.model.forward(load_scene(root / "data" / f"scene_{k:03d}.scene"))
        for a in out.anchors:
            fixed &= all(np.array_equal(getattr(a, f), getattr(init, f)) for f in ("x", "y", "l", "w"))
            in_range &= bool(np.all(a.h.data > 0) and np.all(a.h.data < state.model.z_range))
    ok = fixed and in_range and state.step == DESK_STEPS
    verdict(9, ok, f"after {state.step} steps: x,y,l,w bit-identical {fixed}, heights in (0, z_range) {in_range}")
    assert ok


def test_persistence(verdict, tmp_path):
    scene = generate_scene(5)
    save_scene(scene, tmp_path / "a.scene")
    back = load_scene(tmp_path / "a.scene")
    save_scene(back, tmp_path / "b.scene")
    scene_ok = (tmp_path / "a.scene").read_bytes() == (tmp_path / "b.scene").read_bytes() and \
        np.array_equal(back.gt.labels, scene.gt.labels) and \
        np.array_equal(back.view_features, scene.view_features)

    data = tmp_path / "data"
    assert cli.main(["synth", "--seed", "0", "--count", "2", "--out", str(data)]) == 0
    base = ["train", "--data", str(data), "--steps", "12", "--deterministic"]
    assert cli.main(base + ["--out", str(tmp_path / "full")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "part"), "--stop-at", "6"]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "part"), "--resume"]) == 0
    resume_ok = all((tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes()
                    for f in ("loss.csv", "checkpoint/params.bin"))

    state = load_state(tmp_path / "full" / "checkpoint", load_scene(data / "scene_000.scene"))
    save_state(state, tmp_path / "again")
    ckpt_ok = (tmp_path / "again" / "params.bin").read_bytes() == \
        (tmp_path / "full" / "checkpoint" / "params.bin").read_bytes()
    ok = scene_ok and ckpt_ok and resume_ok
    verdict(10, ok, f"scene round trip {scene_ok}, checkpoint round trip {ckpt_ok}, "
                    f"resume 6+6 == uninterrupted 12 {resume_ok}")
    assert ok
