import os

import numpy as np
import pytest

from lanediff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from lanediff.config import ConfigError, RunConfig, config_to_text, parse_config_text
from lanediff.seeding import rng_stream, stream_key


# ---- seeding -----------------------------------------------------------------


def test_streams_reproducible():
    a = rng_stream(42, "sim").standard_normal(5)
    b = rng_stream(42, "sim").standard_normal(5)
    assert np.array_equal(a, b)


def test_streams_independent_by_label():
    a = rng_stream(42, "sim").standard_normal(5)
    b = rng_stream(42, "policy").standard_normal(5)
    assert not np.array_equal(a, b)


def test_stream_key_uses_all_labels():
    assert stream_key(1, "a", 0) != stream_key(1, "a", 1)
    assert stream_key(1, "a") != stream_key(2, "a")


# ---- checkpoint -------------------------------------------------------------------


def arrays_fixture():
    rng = np.random.default_rng(0)
    return {
        "policy.w": rng.standard_normal((3, 4)).astype(np.float32),
        "policy.b": rng.standard_normal(4),
        "encoder.step": np.array([7], dtype=np.int64),
    }


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    path = tmp_path / "x.ckpt"
    arrays = arrays_fixture()
    config = {"H": 9, "nested": {"a": 1.5}}
    save_checkpoint(path, arrays, config, seed=123)
    back, cfg, seed = load_checkpoint(path)
    assert seed == 123
    assert cfg == config
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype.newbyteorder("<")
        assert np.array_equal(back[k], arrays[k])
        assert back[k].tobytes() == arrays[k].astype(
            arrays[k].dtype.newbyteorder("<")).tobytes()


def test_checkpoint_double_save_identical_bytes(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, arrays_fixture(), {"k": 1}, 5)
    save_checkpoint(p2, arrays_fixture(), {"k": 1}, 5)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays_fixture(), {}, 0)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays_fixture(), {}, 0)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays_fixture(), {}, 0)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_on_load_into_model(tmp_path):
    from lanediff import nn

    class M(nn.Module):
        def __init__(self):
            self.w = nn.Parameter(np.zeros((2, 2)))

    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.zeros((3, 3))}, {}, 0)
    arrays, _, _ = load_checkpoint(path)
    with pytest.raises(ValueError, match="shape mismatch"):
        M().load_state_arrays(arrays)


# ---- run config -------------------------------------------------------------------------


def test_empty_config_gives_paper_defaults():
    cfg = parse_config_text("")
    assert (cfg.H, cfg.P, cfg.T) == (9, 5, 50)
    assert cfg.world_model_kind == "oracle"


def test_config_rejects_h_zero():
    with pytest.raises(ConfigError, match='"H"'):
        parse_config_text("H = 0")


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match='"foo"'):
        parse_config_text("foo = 3")
    with pytest.raises(ConfigError, match='"scenario.bogus"'):
        parse_config_text("scenario.bogus = 3")


def test_config_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("H = 9\n# fine\nT = not_an_int\n")


def test_config_obstacles_and_sections():
    text = """
    H = 9
    scenario.route_length_m = 60
    scenario.obstacle = 20, 0.5, 4, 1.8
    scenario.obstacle = 35, -0.5, 4, 1.8
    trainer.lr = 3e-4
    encoder.d_model = 32
    """
    cfg = parse_config_text(text)
    sc = cfg.scenario_config()
    assert sc.route_length_m == 60
    assert len(sc.obstacle_layout) == 2
    assert cfg.trainer_hyper().lr == pytest.approx(3e-4)
    assert cfg.encoder_config().d_model == 32


def test_config_roundtrip_through_echo():
    text = "H = 7\nT = 10\nscenario.num_traffic = 2\ntrainer.batch_size = 8\n"
    cfg = parse_config_text(text)
    echoed = config_to_text(cfg)
    cfg2 = parse_config_text(echoed)
    assert cfg2.H == 7 and cfg2.T == 10
    assert cfg2.scenario["num_traffic"] == 2
    assert cfg2.trainer["batch_size"] == 8


def test_config_kmh_conversion():
    cfg = parse_config_text("scenario.ego_speed_kmh = 7")
    assert cfg.scenario_config().ego_speed_mps == pytest.approx(7 / 3.6)
