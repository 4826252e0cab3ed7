"""Command line: ``bevocc synth|train|eval|infer|gradcheck|bench``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numeric failure, 5 failed check. ``BEVOCC_THREADS`` sets the default
BLAS thread count; ``--deterministic`` forces one thread.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .numerics import CheckpointError, count_macs, save_checkpoint
from .rayiou import GeometryMismatch, merge_results, table_rows, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("bevocc")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_digest() -> str:
    """Hash of the package sources, so a manifest pins the exact code."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class RunManifest:
    """Config snapshot, seed, code version, input hashes and every output with its hash."""

    def __init__(self, command: str, argv: list[str], config_text: str | None = None, seed: int | None = None):
        self.command = command
        self.argv = list(argv)
        self.config_text = config_text
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.started = time.time()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        p = Path(path)
        if p.is_dir():
            self.outputs.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        else:
            self.outputs.append(p)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        path = out_dir / "manifest.json"
        outputs = {}
        for p in sorted(set(self.outputs)):
            if p.exists() and p != path:
                key = p.relative_to(out_dir).as_posix() if p.is_relative_to(out_dir) else str(p)
                outputs[key] = sha256_file(p)
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config_text,
            "seed": self.seed,
            "code_version": __version__,
            "code_sha256": code_digest(),
            "inputs": self.inputs,
            "outputs": outputs,
            "wall_clock_s": round(time.time() - self.started, 3),
            **self.extra,
        }
        _atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def configure_threads(threads: int | None, deterministic: bool):
    if deterministic:
        n = 1
    elif threads is not None:
        n = threads
    else:
        env = os.environ.get("BEVOCC_THREADS")
        try:
            n = int(env) if env else None
        except ValueError as exc:
            raise CliError(f"BEVOCC_THREADS must be an integer, got {env!r}", EXIT_CONFIG) from exc
    if n is not None and n < 1:
        raise CliError(f"thread count must be >= 1, got {n}", EXIT_CONFIG)
    return threadpool_limits(limits=n) if n is not None else None


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _load_scenes(data_dir, cfg: RunConfig, manifest: RunManifest | None = None):
    from .scene_gen import load_scene
    paths = sorted(Path(data_dir).glob("*.scene"))
    if not paths:
        raise CliError(f"no .scene files in {data_dir}", EXIT_IO)
    scenes = []
    for p in paths:
        scenes.append(load_scene(p, expect_dims=tuple(cfg.scene.grid_dims)))
        if manifest is not None:
            manifest.add_input(p)
    return paths, scenes


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .scene_gen import generate_scene, save_scene
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("synth", sys.argv[1:], dump_config(cfg), args.seed)
    for i in range(args.count):
        path = out / f"scene_{i:03d}.scene"
        save_scene(generate_scene(args.seed + i, cfg.scene), path)
        man.add_output(path)
    man.extra["count"] = args.count
    man.write(out)
    print(f"wrote {args.count} scene(s) to {out}")
    return EXIT_OK


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_train(args) -> int:
    import dataclasses

    from .model import NonFiniteLoss, SceneGeometry, TrainState, dataset_weights, evaluate, load_state, \
        save_state, train_step
    from .plotting import plot_loss
    cfg = _config(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, steps=args.steps))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("train", sys.argv[1:], dump_config(cfg), cfg.model.seed)
    paths, scenes = _load_scenes(args.data, cfg, man)
    if args.holdout >= len(scenes):
        raise CliError(f"--holdout {args.holdout} leaves no training scenes out of {len(scenes)}", EXIT_CONFIG)
    train_scenes = scenes[:len(scenes) - args.holdout]
    eval_scene = scenes[-1] if args.holdout else scenes[0]
    ckpt = out / "checkpoint"
    if args.resume:
        if not (ckpt / "manifest.txt").exists():
            raise CliError(f"--resume given but no checkpoint at {ckpt}", EXIT_IO)
        state = load_state(ckpt, train_scenes[0])
        if state.cfg != cfg.model:
            raise CliError("checkpoint was trained with a different model/train config", EXIT_CONFIG)
        log.info("resuming at step %d", state.step)
    else:
        state = TrainState.create(cfg.model, SceneGeometry.of(train_scenes[0]))
    weights = dataset_weights(train_scenes)
    evals_path = out / "eval.csv"
    evals = []
    if args.resume and evals_path.exists():
        with open(evals_path) as fh:
            evals = [row for row in csv.reader(fh)][1:]
    steps = cfg.model.steps
    stop = steps if args.stop_at is None else min(steps, args.stop_at)
    status = "ok"
    code = EXIT_OK
    try:
        while state.step < stop:
            train_step(state, train_scenes[state.step % len(train_scenes)], weights)
            if state.step % cfg.train.eval_every == 0 or state.step == steps:
                res, acc, _ = evaluate(state, eval_scene)
                ray = float(np.mean([r.mean for r in res]))
                evals = [e for e in evals if int(e[0]) < state.step]
                evals.append([str(state.step), _fmt(ray), _fmt(acc)])
                log.info("step %d loss %.5f rayiou %.4f acc %.4f", state.step, state.history[-1][1], ray, acc)
            if state.step % cfg.train.checkpoint_every == 0 or state.step in (steps, stop):
                save_state(state, ckpt)
    except NonFiniteLoss as exc:
        status = f"non-finite: {exc}"
        code = EXIT_NUMERIC
        print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
    _write_csv(out / "loss.csv", ["step", "loss", "lr"], [[int(s), _fmt(l), _fmt(r)] for s, l, r in state.history])
    _write_csv(evals_path, ["step", "rayiou", "voxel_accuracy"], evals)
    plot_loss(state.history, out / "loss.png", [(int(e[0]), float(e[1])) for e in evals])
    for p in ("loss.csv", "eval.csv", "loss.png"):
        man.add_output(out / p)
    if ckpt.exists():
        man.add_output(ckpt)
    man.extra.update(status=status, steps=state.step, holdout=args.holdout)
    man.write(out)
    if code == EXIT_OK:
        print(f"trained to step {state.step}; final loss {state.history[-1][1]:.5f}" if state.history
              else "nothing to do")
    return code


def _predictions(args, cfg, scenes):
    from .model import infer, load_state
    from .occ_head import OccupancyGrid
    if args.oracle:
        return [OccupancyGrid(s.gt.labels.copy(), s.gt.voxel_size, s.gt.origin) for s in scenes], None
    if args.checkpoint is None:
        raise CliError("--checkpoint is required unless --oracle is given", EXIT_CONFIG)
    state = load_state(args.checkpoint, scenes[0])
    return [infer(state, s) for s in scenes], state


def cmd_eval(args) -> int:
    from .model import evaluation_rays, voxel_accuracy
    from .plotting import plot_slices, write_slices
    from .rayiou import evaluate_thresholds
    from .scene_gen import CLASS_NAMES
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("eval", sys.argv[1:], dump_config(cfg))
    if args.checkpoint:
        man.add_input(Path(args.checkpoint) / "manifest.txt")
        man.add_input(Path(args.checkpoint) / "params.bin")
    paths, scenes = _load_scenes(args.data, cfg, man)
    preds, _ = _predictions(args, cfg, scenes)
    names = list(CLASS_NAMES[:scenes[0].class_count])
    per_scene, rows = [], []
    for p, scene, pred in zip(paths, scenes, preds):
        res = evaluate_thresholds(pred, scene.gt, evaluation_rays(scene), scene.class_count)
        per_scene.append(res)
        rows.append([p.stem, _fmt(np.mean([r.mean for r in res])), _fmt(voxel_accuracy(pred, scene.gt))])
        np.save(out / f"{p.stem}.pred.npy", pred.labels)
        man.add_output(out / f"{p.stem}.pred.npy")
        for q in write_slices(out / "slices", p.stem, pred.labels, scene.gt.labels, scene.class_count):
            man.add_output(q)
        man.add_output(plot_slices(pred.labels, scene.gt.labels, out / f"{p.stem}_slices.png", names))
    merged = merge_results(per_scene)
    write_csv(merged, names, out / "rayiou.csv")
    _write_csv(out / "scenes.csv", ["scene", "rayiou", "voxel_accuracy"], rows)
    man.add_output(out / "rayiou.csv")
    man.add_output(out / "scenes.csv")
    man.write(out)
    for row in table_rows(merged, names):
        print(",".join(row))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import attention_dump, load_state
    from .plotting import write_slices
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("infer", sys.argv[1:], dump_config(cfg))
    paths, scenes = _load_scenes(args.data, cfg, man)
    state = load_state(args.checkpoint, scenes[0])
    for p, scene in zip(paths, scenes):
        fwd = state.model.forward(scene)
        labels = np.argmax(fwd.logits[0].data, axis=-1).astype(np.uint8)
        np.save(out / f"{p.stem}.pred.npy", labels)
        man.add_output(out / f"{p.stem}.pred.npy")
        save_checkpoint(out / f"{p.stem}.attention", attention_dump(fwd), {"scene": p.name})
        man.add_output(out / f"{p.stem}.attention")
        for q in write_slices(out / "slices", p.stem, labels, scene.gt.labels, scene.class_count):
            man.add_output(q)
    man.write(out)
    print(f"wrote predictions for {len(scenes)} scene(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import THRESHOLD, run_suite, worst_per_module
    if args.config:
        _config(args.config)
    t0 = time.perf_counter()
    results = run_suite(seed=args.seed)
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag} {r.module}.{r.name} max_rel_err={r.max_rel_error:.3e} checked={r.checked}"
              + ("" if r.passed else f" [{r.detail}]"))
    print(f"-- worst per module (threshold {THRESHOLD:g})")
    for module, r in worst_per_module(results).items():
        print(f"{module}: {r.name} {r.max_rel_error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} operations passed in {time.perf_counter() - t0:.1f} s")
    if args.out:
        _write_csv(Path(args.out), ["module", "operation", "max_rel_error", "checked", "passed"],
                   [[r.module, r.name, _fmt(r.max_rel_error), r.checked, int(r.passed)] for r in results])
    if failed:
        print("failed: " + ", ".join(f"{r.module}.{r.name}" for r in failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def bench_rows(ni_list, nb_list, c: int = 32, heads: int = 4, seed: int = 0, repeats: int = 3):
    """Instrumented multiply-adds of both attention patterns, and bidirectional wall time."""
    from .attention import BEVQueryGrid, IBBiXAttn, InstanceQuerySet, dense_self_attention_scores
    from .numerics import Tensor
    rng = np.random.default_rng(seed)
    block = IBBiXAttn(c, heads, rng)
    dense_cache: dict[int, int] = {}
    rows = []
    for n_b in nb_list:
        if n_b not in dense_cache:
            x = rng.normal(size=(n_b, c))
            with count_macs() as counter:
                dense_self_attention_scores(x, heads, chunk=max(1, (1 << 22) // (heads * n_b)))
            dense_cache[n_b] = counter.counts["attn_scores"]
        bev = BEVQueryGrid(Tensor(rng.normal(size=(n_b, c))), (n_b, 1), np.zeros((n_b, c)))
        for n_i in ni_list:
            inst = InstanceQuerySet(Tensor(rng.normal(size=(n_i, c))), np.zeros((n_i, c)))
            with count_macs() as counter:
                block(inst, bev)
            best = None
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                block(inst, bev)
                dt = time.perf_counter_ns() - t0
                best = dt if best is None else min(best, dt)
            rows.append({"n_i": n_i, "n_b": n_b, "bixattn_flops": counter.counts["attn_scores"],
                         "dense_flops": dense_cache[n_b], "measured_ns": best})
    rows.sort(key=lambda r: (r["n_i"], r["n_b"]))
    return rows


BENCH_COLUMNS = ["n_i", "n_b", "bixattn_flops", "dense_flops", "measured_ns"]


def cmd_bench(args) -> int:
    from .plotting import plot_bench
    ni = _int_list(args.ni_list, "--ni-list")
    nb = _int_list(args.nb_list, "--nb-list")
    bad = [n for n in ni if n >= min(nb)]
    if bad:
        log.warning("n_i values %s are not below every n_b", bad)
    rows = bench_rows(ni, nb, args.channels, args.heads, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, BENCH_COLUMNS, [[r[k] for k in BENCH_COLUMNS] for r in rows])
    plot_bench(rows, out.with_suffix(".png"))
    man = RunManifest("bench", sys.argv[1:], seed=args.seed)
    man.add_output(out)
    man.add_output(out.with_suffix(".png"))
    man.write(out.parent)
    for r in rows:
        print(",".join(str(r[k]) for k in BENCH_COLUMNS))
    return EXIT_OK


def _int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"{flag}: expected comma-separated integers, got {text!r}", EXIT_CONFIG) from exc
    if not vals or min(vals) < 1:
        raise CliError(f"{flag}: need at least one positive integer", EXIT_CONFIG)
    return vals


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $BEVOCC_THREADS)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded reductions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bevocc", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"bevocc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train on a scene directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="override [train] steps")
    t.add_argument("--holdout", type=int, default=0, help="last N scenes are held out for evaluation")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    t.add_argument("--stop-at", type=int, default=None,
                   help="stop (with a checkpoint) at this step without changing the schedule")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="RayIoU table, occupancy dumps and slices")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="predicted labels and attention dumps")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="optional CSV report")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="attention cost sweep")
    b.add_argument("--ni-list", default="20,50,100,200")
    b.add_argument("--nb-list", default="256,1024,4096,16384")
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .model import ModelConfigError, ModelError, NonFiniteLoss
    from .scene_gen import SceneConfigError, SceneFormatError, SceneGenerationError
    try:
        limits = configure_threads(args.threads, args.deterministic)
        with limits if limits is not None else contextlib.nullcontext():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SceneConfigError, ModelConfigError, GeometryMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SceneFormatError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, ModelError, SceneGenerationError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
