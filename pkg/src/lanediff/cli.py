"""Command-line entry point.

Subcommands:
    sim-rollout  scripted-action episodes -> episodes.csv, metrics.csv
    train-wm     collect transitions, fit the learned world model
    train-dpa    policy training against the chosen world model
    eval         load a checkpoint, run episodes, emit metrics
    gradcheck    finite-difference suites over every block and loss
    bandit       scalar one-step fixture: gradient oracle + convergence
    modes        sample the trained policy at a fixed state, report the
                 left/right passing-mode histogram

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run
writes the resolved config and a build tag into the output directory
before any computation.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_to_text, load_run_config
from .ddpo import (
    Context,
    PolicyTrainer,
    bandit_fixture,
    ddpo_loss,
    normalize_advantages,
    plan_and_run_episode,
    train_bandit,
)
from .diffusion import DenoiserNet, DiffusionPolicy, decode_trajectory, make_schedule
from .encoder import ObsHistory, StateEncoder
from .metrics import (
    aggregate,
    episodic_return,
    write_csv,
    write_curves_csv,
    write_episodes_csv,
    write_metrics_csv,
)
from .seeding import rng_stream
from .sim import HighwaySim
from .world_model import (
    LearnedWorldModel,
    OracleWorldModel,
    collect_transitions,
    train_wm,
)


def build_tag() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except Exception:
        pass
    return f"lanediff-{__version__}"


def prepare_output(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))
    with open(os.path.join(out_dir, "build_tag.txt"), "w", encoding="utf-8") as f:
        f.write(build_tag() + "\n")


def build_components(cfg: RunConfig):
    """Instantiate sim, encoder, policy (+ learned world model) from a config."""
    sim = HighwaySim(cfg.scenario_config())
    enc = StateEncoder(cfg.encoder_config(), raster_px=sim.config.raster_px,
                       rng=rng_stream(cfg.seed, "encoder-init"))
    net = DenoiserNet(cfg.H, 11, enc.config.d_state,
                      rng=rng_stream(cfg.seed, "policy-init"),
                      width=cfg.policy["width"], d_cond=cfg.policy["d_cond"],
                      d_time=cfg.policy["d_time"])
    policy = DiffusionPolicy(net, make_schedule(cfg.T, kind=cfg.schedule_kind))
    wm = None
    if cfg.world_model_kind == "learned":
        wm = LearnedWorldModel(cfg.wm_config(), enc, rng=rng_stream(cfg.seed, "wm-init"))
    return sim, enc, policy, wm


def checkpoint_arrays(policy, encoder, wm=None):
    arrays = {f"policy.{k}": v for k, v in policy.snapshot().items()}
    arrays.update({f"encoder.{k}": v for k, v in encoder.state_arrays().items()})
    if wm is not None:
        arrays.update({f"wm.{k}": v for k, v in wm.state_arrays().items()})
    return arrays


def load_into_components(arrays, policy, encoder, wm=None):
    def sub(prefix):
        plen = len(prefix)
        return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix)}

    policy.restore(sub("policy."))
    encoder.load_state_arrays(sub("encoder."))
    if wm is not None and any(k.startswith("wm.") for k in arrays):
        wm.load_state_arrays(sub("wm."))


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.iterations = args.steps
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    if getattr(args, "wm", None) is not None:
        cfg.world_model_kind = args.wm
    return cfg.validate()


# ---- subcommands ------------------------------------------------------------


def cmd_sim_rollout(args):
    cfg = _load_config(args)
    prepare_output(cfg, args.out)
    bins = [int(b) for b in args.bins.split(",")]
    sim = HighwaySim(cfg.scenario_config())
    logs = []
    for ep in range(cfg.episodes):
        state, _ = sim.reset()
        steps = []
        i = 0
        while not state.done:
            b = bins[i % len(bins)]
            out = sim.step(state, b)
            steps.append((b, out.reward, out.infraction, out.progress_m))
            i += 1
        from .metrics import EpisodeLog

        logs.append(EpisodeLog(steps=steps, route_length_m=sim.config.route_length_m,
                               seed=cfg.seed))
    write_episodes_csv(os.path.join(args.out, "episodes.csv"), logs)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), aggregate(logs))
    print(f"wrote {cfg.episodes} scripted episodes to {args.out}")
    return 0


def cmd_train_wm(args):
    cfg = _load_config(args)
    cfg.world_model_kind = "learned"
    prepare_output(cfg, args.out)
    sim, enc, policy, wm = build_components(cfg)

    if args.behavior == "dpa":
        def plan(history, rng):
            with ad.no_grad():
                s0 = enc.encode(history).data
            tau0, _ = policy.sample_trajectory(s0, rng)
            return decode_trajectory(tau0)
    else:
        def plan(history, rng):
            return rng.integers(0, 11, size=cfg.H)

    rng = rng_stream(cfg.seed, "wm-data")
    buf = collect_transitions(sim, plan, args.transitions, rng, cfg.H, cfg.P)
    curve = train_wm(wm, buf, args.steps or cfg.iterations, rng_stream(cfg.seed, "wm-train"),
                     lr=cfg.trainer_hyper().lr, batch_size=cfg.trainer_hyper().batch_size)
    write_csv(os.path.join(args.out, "wm_loss.csv"),
              ("step", "total", "obs", "reward", "discount"), curve)
    save_checkpoint(os.path.join(args.out, "wm.ckpt"),
                    checkpoint_arrays(policy, enc, wm), cfg.to_dict(), cfg.seed)
    print(f"trained world model for {len(curve)} steps on {len(buf)} transitions")
    return 0


def cmd_train_dpa(args):
    cfg = _load_config(args)
    prepare_output(cfg, args.out)
    sim, enc, policy, wm = build_components(cfg)
    if cfg.world_model_kind == "learned":
        if args.wm_ckpt:
            arrays, _, _ = load_checkpoint(args.wm_ckpt)
            load_into_components(arrays, policy, enc, wm)
        world_model = wm
    else:
        world_model = OracleWorldModel(sim, cfg.trainer_hyper().gamma_base)

    trainer = PolicyTrainer(
        sim=sim, policy=policy, encoder=enc, world_model=world_model,
        hyper=cfg.trainer_hyper(), rng=rng_stream(cfg.seed, "dpa-train"),
        train_encoder=cfg.train_encoder, plan_stride=cfg.plan_stride,
        wm_refresh_every=args.wm_refresh if cfg.world_model_kind == "learned" else 0,
    )
    history = trainer.run(cfg.iterations)
    from .ddpo import TrainStats

    write_csv(os.path.join(args.out, "train_stats.csv"), TrainStats.CSV_COLUMNS,
              [s.row() for s in history])
    write_curves_csv(os.path.join(args.out, "curves.csv"),
                     [s.mean_return for s in history])
    save_checkpoint(os.path.join(args.out, "policy.ckpt"),
                    checkpoint_arrays(policy, enc, wm), cfg.to_dict(), cfg.seed)
    print(f"trained policy for {len(history)} iterations; "
          f"final mean return {history[-1].mean_return:.3f}" if history else "no iterations run")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    prepare_output(cfg, args.out)
    sim, enc, policy, wm = build_components(cfg)
    arrays, _, _ = load_checkpoint(args.ckpt)
    load_into_components(arrays, policy, enc, wm)
    logs = []
    for ep in range(cfg.episodes):
        rng = rng_stream(cfg.seed, "eval-episode", ep)
        logs.append(plan_and_run_episode(sim, policy, enc, rng,
                                         plan_stride=cfg.plan_stride))
    write_episodes_csv(os.path.join(args.out, "episodes.csv"), logs)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), aggregate(logs))
    rep = aggregate(logs)
    print(f"eval: SR {rep.success_rate_pct:.1f}%  RC {rep.route_completion_pct:.1f}%  "
          f"infr/km {rep.infractions_per_km:.2f}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck_suite import run_all_suites

    results = run_all_suites(seed=args.seed or 0, n_seeds=args.n_seeds)
    worst = 0.0
    for name, err in results:
        print(f"{name:40s} max rel. error {err:.3e}")
        worst = max(worst, err)
    print(f"worst overall: {worst:.3e} (tolerance 1e-4)")
    return 0 if worst <= 1e-4 else 1


def cmd_bandit(args):
    cfg = _load_config(args)
    prepare_output(cfg, args.out)
    task = bandit_fixture(args.target)
    rng = rng_stream(cfg.seed, "bandit")

    samples = task.make_samples(10_000, rng)
    normalize_advantages(samples, "none")
    from .ddpo import TrainerHyper

    loss, _ = ddpo_loss(samples, task.policy, TrainerHyper(reward_norm="none"))
    task.policy.mu.zero_grad()
    loss.backward()
    estimate = -float(task.policy.mu.grad[0])
    truth = task.closed_form_grad()
    print(f"gradient estimate {estimate:+.4f} vs closed form {truth:+.4f}")

    returns = train_bandit(task, args.iterations, rng)
    mu = float(task.policy.mu.data[0])
    write_csv(os.path.join(args.out, "bandit.csv"), ("iteration", "mean_return"),
              list(enumerate(returns)))
    ok = abs(mu - args.target) <= 0.05
    print(f"after {args.iterations} iterations: mu = {mu:.4f} (target {args.target}), "
          f"{'converged' if ok else 'NOT converged'}")
    return 0 if ok else 1


def classify_modes(policy, encoder, history, rng, n_samples=100, threshold=0.3):
    """Sample trajectories at one state and bucket them left/center/right."""
    with ad.no_grad():
        s0 = encoder.encode(history).data
    counts = {"left": 0, "center": 0, "right": 0}
    from .sim import action_value

    for i in range(n_samples):
        tau0, _ = policy.sample_trajectory(s0, rng)
        bins = decode_trajectory(tau0)
        net_disp = float(sum(action_value(int(b)) for b in bins))
        if net_disp > threshold:
            counts["left"] += 1
        elif net_disp < -threshold:
            counts["right"] += 1
        else:
            counts["center"] += 1
    return counts


def cmd_modes(args):
    cfg = _load_config(args)
    if not cfg.scenario.get("obstacle_layout"):
        # symmetric centered obstacle ahead of the spawn
        cfg.scenario["obstacle_layout"] = [(8.0, 0.0, 2.0, 1.2)]
        cfg.scenario.setdefault("lane_half_width_m", 3.5)
        cfg.scenario.setdefault("route_length_m", 40.0)
    prepare_output(cfg, args.out)
    sim, enc, policy, wm = build_components(cfg)
    if args.ckpt:
        arrays, _, _ = load_checkpoint(args.ckpt)
        load_into_components(arrays, policy, enc, wm)
    else:
        world_model = OracleWorldModel(sim, cfg.trainer_hyper().gamma_base)
        trainer = PolicyTrainer(sim=sim, policy=policy, encoder=enc,
                                world_model=world_model, hyper=cfg.trainer_hyper(),
                                rng=rng_stream(cfg.seed, "modes-train"),
                                train_encoder=cfg.train_encoder,
                                plan_stride=cfg.plan_stride)
        trainer.run(cfg.iterations)

    state, obs = sim.reset()
    history = ObsHistory([obs], cfg.P)
    counts = classify_modes(policy, enc, history, rng_stream(cfg.seed, "modes-sample"),
                            n_samples=args.samples)
    total = sum(counts.values())
    write_csv(os.path.join(args.out, "modes_histogram.csv"),
              ("mode", "count", "frequency"),
              [(k, v, v / total) for k, v in sorted(counts.items())])
    left, right = counts["left"] / total, counts["right"] / total
    bimodal = left >= 0.05 and right >= 0.05
    lines = [f"mode histogram: {counts}",
             f"left {left:.2f}  right {right:.2f}  center {counts['center'] / total:.2f}"]
    lines.append("bimodal: PASS (both passing modes present at >= 5%)" if bimodal
                 else "bimodal: FAIL - training collapsed to one mode; see histogram")
    report = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "modes_report.txt"), "w", encoding="utf-8") as f:
        f.write(report)
    print(report, end="")
    return 0


# ---- argument plumbing ----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lanediff",
                                description="diffusion-policy driving lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", default=None, help="run-config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("sim-rollout", help="scripted-action episodes")
    common(sp, "out/sim-rollout")
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--bins", default="5", help="comma list of action bins, cycled")
    sp.set_defaults(func=cmd_sim_rollout)

    sp = sub.add_parser("train-wm", help="fit the learned world model")
    common(sp, "out/train-wm")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--transitions", type=int, default=2000)
    sp.add_argument("--behavior", choices=("dpa", "random"), default="dpa")
    sp.set_defaults(func=cmd_train_wm)

    sp = sub.add_parser("train-dpa", help="train the diffusion policy")
    common(sp, "out/train-dpa")
    sp.add_argument("--steps", type=int, default=None, help="training iterations")
    sp.add_argument("--wm", choices=("oracle", "learned"), default=None)
    sp.add_argument("--wm-ckpt", default=None)
    sp.add_argument("--wm-refresh", type=int, default=10)
    sp.set_defaults(func=cmd_train_dpa)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, "out/eval")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--episodes", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-seeds", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bandit", help="one-step scalar oracle fixture")
    common(sp, "out/bandit")
    sp.add_argument("--iterations", type=int, default=500)
    sp.add_argument("--target", type=float, default=1.3)
    sp.set_defaults(func=cmd_bandit)

    sp = sub.add_parser("modes", help="multi-modality histogram at a fixed state")
    common(sp, "out/modes")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--samples", type=int, default=100)
    sp.set_defaults(func=cmd_modes)

    return p


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
