import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from bevocc.model import ModelConfig
from bevocc.scene_gen import SceneConfig


def test_empty_file_gives_defaults():
    assert parse_config("") == RunConfig()


def test_values_are_typed():
    cfg = parse_config("[scene]\ngrid_dims = 16,16,4\nvoxel_size = 1.0\n"
                       "[model]\nchannels = 16\ninstance_conditioning = yes\n"
                       "[train]\nsteps = 7\nlr = 0.01\neval_every = 3\n")
    assert cfg.scene.grid_dims == (16, 16, 4) and cfg.scene.voxel_size == 1.0
    assert cfg.model.channels == 16 and cfg.model.instance_conditioning is True
    assert cfg.model.steps == 7 and cfg.model.lr == 0.01 and cfg.train.eval_every == 3


def test_dump_round_trip():
    cfg = RunConfig(scene=dataclasses.replace(SceneConfig(), frames=4, occupancy_band=(0.05, 0.25)),
                    model=dataclasses.replace(ModelConfig(), head="channel_to_height", residual=False, lr=3e-4))
    assert parse_config(dump_config(cfg)) == cfg


def test_unknown_keys_and_bad_values_reported_together():
    with pytest.raises(ConfigError) as err:
        parse_config("[scene]\ncolour = red\nframes = many\n[modle]\nx = 1\n[model]\nheads = 2.5\n")
    msg = str(err.value)
    for part in ("'colour'", "[modle]", "frames", "heads"):
        assert part in msg


def test_invalid_combinations_reported_together():
    with pytest.raises(ConfigError) as err:
        parse_config("[scene]\nframes = 0\n[model]\nchannels = 30\nheads = 4\nhead = voxel\n")
    msg = str(err.value)
    assert "frames" in msg and "not divisible" in msg and "head must be one of" in msg


def test_model_frames_cannot_exceed_scene_frames():
    with pytest.raises(ConfigError, match="model uses 9 frames"):
        parse_config("[model]\nframes = 9\n")


def test_bad_boolean_and_tuple_arity():
    with pytest.raises(ConfigError) as err:
        parse_config("[model]\nresidual = maybe\n[scene]\ngrid_dims = 32,32\n")
    assert "residual" in str(err.value) and "grid_dims" in str(err.value)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([4, 8, 16, 32]), st.integers(1, 6), st.sampled_from([1, 2, 4]), st.floats(1e-5, 1e-1))
def test_round_trip_property(channels, layers, stride, lr):
    model = dataclasses.replace(ModelConfig(), channels=channels, heads=2, layers=layers, bev_stride=stride,
                                instance_queries=3, lr=lr)
    cfg = RunConfig(model=model)
    assert parse_config(dump_config(cfg)) == cfg
