import csv
import json

import numpy as np
import pytest

from bevocc import cli, model
from bevocc.numerics import ops
from bevocc.numerics.tensor import as_tensor, make_result

SMALL_INI = """\
[scene]
grid_dims = 16,16,4
voxel_size = 1.0
z_min = -1.0
frames = 3
cameras = 4
image_size = 32,16
c_img = 8
boxes = 2,4

[model]
channels = 16
heads = 2
instance_queries = 4
layers = 2
points_per_frame = 2

[train]
steps = 4
warmup = 0
eval_every = 2
checkpoint_every = 2
"""


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "small.ini"
    ini.write_text(SMALL_INI)
    assert cli.main(["synth", "--config", str(ini), "--seed", "3", "--count", "2", "--out", str(root / "data")]) == 0
    return ini, root / "data"


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_is_deterministic(small, tmp_path):
    ini, data = small
    assert cli.main(["synth", "--config", str(ini), "--seed", "3", "--count", "2", "--out", str(tmp_path)]) == 0
    for name in ("scene_000.scene", "scene_001.scene"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_synth_manifest_lists_outputs(tmp_path, small):
    ini, _ = small
    assert cli.main(["synth", "--config", str(ini), "--count", "4", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    scenes = [k for k in doc["outputs"] if k.endswith(".scene")]
    assert len(scenes) == 4
    assert doc["command"] == "synth" and doc["config"] and len(doc["code_sha256"]) == 64


def test_missing_required_flag_is_usage_error(capsys):
    assert cli.main(["synth"]) == 2
    assert "--out" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nheads = 3\nchannels = 32\n")
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "divisible" in capsys.readouterr().err


def test_empty_data_dir_is_io_error(tmp_path, small):
    ini, _ = small
    (tmp_path / "empty").mkdir()
    assert cli.main(["eval", "--config", str(ini), "--oracle", "--data", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 3


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("BEVOCC_THREADS", "lots")
    assert cli.main(["synth", "--out", str(tmp_path)]) == 2


def test_eval_oracle_scores_one(small, tmp_path, capsys):
    ini, data = small
    assert cli.main(["eval", "--config", str(ini), "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "rayiou.csv")
    assert rows[0] == ["class", "IoU@1m", "IoU@2m", "IoU@4m"]
    mean = [r for r in rows if r[0] == "mean"]
    assert mean and all(float(v) == 1.0 for v in mean[0][1:])
    assert (tmp_path / "scene_000_slices.png").stat().st_size > 0
    assert list((tmp_path / "slices").glob("scene_000_z*_pred.pgm"))
    first = (tmp_path / "rayiou.csv").read_bytes()
    assert cli.main(["eval", "--config", str(ini), "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "rayiou.csv").read_bytes() == first


def test_eval_geometry_mismatch(small, tmp_path):
    _, data = small
    # default config expects a 32x32x8 grid
    assert cli.main(["eval", "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def trained(small, tmp_path_factory):
    ini, data = small
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(ini), "--data", str(data), "--out", str(out), "--deterministic"]) == 0
    return out


def test_train_outputs(trained):
    rows = read_csv(trained / "loss.csv")
    assert rows[0] == ["step", "loss", "lr"] and [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert [r[0] for r in read_csv(trained / "eval.csv")[1:]] == ["2", "4"]
    assert (trained / "loss.png").stat().st_size > 0
    assert (trained / "checkpoint" / "params.bin").exists()
    doc = json.loads((trained / "manifest.json").read_text())
    assert doc["status"] == "ok" and doc["steps"] == 4


def test_train_is_reproducible(small, trained, tmp_path):
    ini, data = small
    assert cli.main(["train", "--config", str(ini), "--data", str(data), "--out", str(tmp_path), "--deterministic"]) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()


def test_train_resume_matches(small, trained, tmp_path):
    ini, data = small
    args = ["train", "--config", str(ini), "--data", str(data), "--out", str(tmp_path), "--deterministic"]
    assert cli.main(args + ["--stop-at", "2"]) == 0
    assert len(read_csv(tmp_path / "loss.csv")) == 3
    assert cli.main(args + ["--resume"]) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    assert (tmp_path / "checkpoint" / "params.bin").read_bytes() == \
        (trained / "checkpoint" / "params.bin").read_bytes()


def test_resume_with_other_config_refused(small, trained, tmp_path):
    ini, data = small
    other = tmp_path / "other.ini"
    other.write_text(SMALL_INI.replace("layers = 2", "layers = 1"))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(ini), "--data", str(data), "--out", str(out), "--stop-at", "2"]) == 0
    assert cli.main(["train", "--config", str(other), "--data", str(data), "--out", str(out), "--resume"]) == 2


def test_non_finite_keeps_checkpoint(small, tmp_path, monkeypatch, capsys):
    ini, data = small
    real = model.train_step

    def flaky(state, scene, weights):
        if state.step == 3:
            raise model.NonFiniteLoss("non-finite loss at step 3")
        return real(state, scene, weights)
    monkeypatch.setattr(model, "train_step", flaky)
    assert cli.main(["train", "--config", str(ini), "--data", str(data), "--out", str(tmp_path)]) == 4
    assert "checkpoint kept" in capsys.readouterr().err
    meta = (tmp_path / "checkpoint" / "manifest.txt").read_text()
    assert "step" in meta
    state = model.load_state(tmp_path / "checkpoint", cli._load_scenes(data, cli._config(ini))[1][0])
    assert state.step == 2


def test_infer_writes_attention(small, trained, tmp_path):
    ini, data = small
    assert cli.main(["infer", "--config", str(ini), "--checkpoint", str(trained / "checkpoint"), "--data", str(data),
                     "--out", str(tmp_path)]) == 0
    pred = np.load(tmp_path / "scene_000.pred.npy")
    assert pred.shape == (16, 16, 4) and pred.max() < 6
    assert (tmp_path / "scene_000.attention" / "params.bin").exists()


def test_eval_checkpoint(small, trained, tmp_path, capsys):
    ini, data = small
    assert cli.main(["eval", "--config", str(ini), "--checkpoint", str(trained / "checkpoint"), "--data", str(data),
                     "--out", str(tmp_path)]) == 0
    assert "mean" in capsys.readouterr().out
    rows = read_csv(tmp_path / "scenes.csv")
    assert rows[0] == ["scene", "rayiou", "voxel_accuracy"] and len(rows) == 3


def test_gradcheck_names_corrupted_op(monkeypatch, capsys):
    def bad_tanh(a):
        a = as_tensor(a)
        out = np.tanh(a.data)
        return make_result(out, (a,), lambda g: a._accumulate(g * (1.0 - out)), "tanh")
    monkeypatch.setattr(ops, "tanh", bad_tanh)
    assert cli.main(["gradcheck"]) == 5
    captured = capsys.readouterr()
    assert "FAIL numerics.tanh" in captured.out
    assert "numerics.tanh" in captured.err


def test_bench_scaling(tmp_path):
    assert cli.main(["bench", "--ni-list", "4,8,16", "--nb-list", "64,128,256", "--channels", "16", "--heads", "2",
                     "--out", str(tmp_path / "bench.csv")]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert rows[0] == ["n_i", "n_b", "bixattn_flops", "dense_flops", "measured_ns"]
    table = {(int(r[0]), int(r[1])): (int(r[2]), int(r[3])) for r in rows[1:]}
    for ni in (4, 8, 16):
        assert table[(ni, 128)][0] == 2 * table[(ni, 64)][0]
        assert table[(ni, 256)][1] == 4 * table[(ni, 128)][1]
    for nb in (64, 128, 256):
        assert table[(4, nb)][0] < table[(8, nb)][0] < table[(16, nb)][0]
    assert (tmp_path / "bench.png").stat().st_size > 0
