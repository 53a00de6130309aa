import os

import numpy as np
import pytest

from lanediff.cli import run_command

TINY = """
H = 5
P = 2
T = 4
iterations = 2
episodes = 2
plan_stride = 5
scenario.route_length_m = 12
scenario.raster_px = 8
encoder.d_model = 8
encoder.n_layers = 1
encoder.n_heads = 2
encoder.d_ff = 16
encoder.d_state = 4
policy.width = 4
policy.d_cond = 8
policy.d_time = 8
trainer.batch_size = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY)
    return str(cfg)


def test_unknown_subcommand_usage_exit():
    assert run_command(["definitely-not-a-command"]) == 2


def test_missing_required_arg_usage_exit():
    assert run_command(["eval"]) == 2  # --ckpt required


def test_runtime_error_exit(tmp_path):
    rc = run_command(["eval", "--ckpt", str(tmp_path / "missing.ckpt"),
                      "--out", str(tmp_path / "o")])
    assert rc == 1


def test_sim_rollout_writes_outputs(tiny_config, tmp_path):
    out = tmp_path / "rollout"
    rc = run_command(["sim-rollout", "--config", tiny_config, "--out", str(out),
                      "--episodes", "2", "--bins", "5"])
    assert rc == 0
    assert (out / "episodes.csv").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "resolved_config.txt").exists()
    assert (out / "build_tag.txt").exists()
    lines = (out / "episodes.csv").read_text().strip().split("\n")
    assert lines[0] == "seed,episode,rc_pct,success,infraction,return"
    assert len(lines) == 3


def test_train_dpa_then_eval_deterministic(tiny_config, tmp_path):
    train_out = tmp_path / "train"
    rc = run_command(["train-dpa", "--config", tiny_config, "--out", str(train_out),
                      "--steps", "2"])
    assert rc == 0
    ckpt = train_out / "policy.ckpt"
    assert ckpt.exists()
    assert (train_out / "train_stats.csv").exists()
    stats = (train_out / "train_stats.csv").read_text().split("\n")
    assert stats[0] == "iteration,mean_return,std_return,mean_clip_fraction,approx_kl,loss"

    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = run_command(["eval", "--config", tiny_config, "--out", str(out),
                          "--ckpt", str(ckpt), "--seed", "7", "--episodes", "2"])
        assert rc == 0
        outs.append((out / "episodes.csv").read_bytes()
                    + (out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_bandit_command_converges(tmp_path):
    out = tmp_path / "bandit"
    rc = run_command(["bandit", "--out", str(out), "--iterations", "300",
                      "--target", "0.8", "--seed", "3"])
    assert rc == 0
    csv = (out / "bandit.csv").read_text().strip().split("\n")
    assert csv[0] == "iteration,mean_return"
    assert len(csv) == 301


def test_modes_command_writes_histogram(tiny_config, tmp_path):
    out = tmp_path / "modes"
    rc = run_command(["modes", "--config", tiny_config, "--out", str(out),
                      "--samples", "20"])
    assert rc == 0
    hist = (out / "modes_histogram.csv").read_text().strip().split("\n")
    assert hist[0] == "mode,count,frequency"
    assert len(hist) == 4
    report = (out / "modes_report.txt").read_text()
    assert "bimodal:" in report


def test_train_wm_command(tiny_config, tmp_path):
    out = tmp_path / "wm"
    rc = run_command(["train-wm", "--config", tiny_config, "--out", str(out),
                      "--steps", "3", "--transitions", "20", "--behavior", "random"])
    assert rc == 0
    assert (out / "wm.ckpt").exists()
    curve = (out / "wm_loss.csv").read_text().strip().split("\n")
    assert curve[0] == "step,total,obs,reward,discount"
    assert len(curve) == 4


def test_resolved_config_echo_parseable(tiny_config, tmp_path):
    from lanediff.config import load_run_config

    out = tmp_path / "echo"
    run_command(["sim-rollout", "--config", tiny_config, "--out", str(out),
                 "--episodes", "1"])
    cfg = load_run_config(out / "resolved_config.txt")
    assert cfg.H == 5 and cfg.T == 4
