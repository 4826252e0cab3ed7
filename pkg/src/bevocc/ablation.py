"""Head ablation: height-aware vs channel-to-height at matched parameter budgets over several seeds."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, SceneGeometry, TrainState, evaluate, train
from .rayiou import merge_results

HEAD_ORDER = ("height_aware", "channel_to_height")


@dataclass
class AblationResult:
    head: str
    seed: int
    params: int
    head_params: int
    rayiou: float
    voxel_accuracy: float
    final_loss: float


@dataclass
class AblationReport:
    steps: int
    runs: list = field(default_factory=list)

    def scores(self) -> dict[str, list[float]]:
        return {h: [r.rayiou for r in self.runs if r.head == h] for h in HEAD_ORDER
                if any(r.head == h for r in self.runs)}

    def mean(self, head: str) -> float:
        return float(np.mean(self.scores()[head]))

    def rows(self) -> list[list[str]]:
        out = [["head", "seed", "params", "head_params", "rayiou", "voxel_accuracy", "final_loss"]]
        for r in self.runs:
            out.append([r.head, str(r.seed), str(r.params), str(r.head_params), f"{r.rayiou:.6f}",
                        f"{r.voxel_accuracy:.6f}", f"{r.final_loss:.6f}"])
        for h, vals in self.scores().items():
            out.append([h, "mean", "", "", f"{np.mean(vals):.6f}", "", ""])
        return out

    def write(self, out_dir) -> list[Path]:
        from .plotting import plot_ablation
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "head_ablation.csv"
        csv_path.write_text("\n".join(",".join(r) for r in self.rows()) + "\n")
        return [csv_path, plot_ablation(self.scores(), out_dir / "head_ablation.png")]


def run_head_ablation(train_scenes, eval_scenes=None, seeds=(0, 1, 2), steps: int = 200,
                      base: ModelConfig | None = None, heads=HEAD_ORDER) -> AblationReport:
    """Train each head from each seed on ``train_scenes``; RayIoU is pooled over ``eval_scenes``."""
    base = base or ModelConfig()
    eval_scenes = eval_scenes or train_scenes
    geom = SceneGeometry.of(train_scenes[0])
    report = AblationReport(steps)
    for seed in seeds:
        for head in heads:
            cfg = dataclasses.replace(base, head=head, seed=seed, steps=steps)
            state = TrainState.create(cfg, geom)
            train(state, train_scenes, steps)
            per_scene, accs = [], []
            for sc in eval_scenes:
                res, acc, _ = evaluate(state, sc)
                per_scene.append(res)
                accs.append(acc)
            merged = merge_results(per_scene)
            report.runs.append(AblationResult(
                head, seed, state.model.num_parameters(), state.model.head.num_parameters(),
                float(np.mean([r.mean for r in merged])), float(np.mean(accs)),
                float(np.mean([h[1] for h in state.history[-20:]]))))
    return report
