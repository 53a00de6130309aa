"""Tuning experiment: lane keeping with the oracle world model."""
import sys
import time

import numpy as np

from lanediff.ddpo import PolicyTrainer, TrainerHyper, plan_and_run_episode
from lanediff.diffusion import DenoiserNet, DiffusionPolicy, make_schedule
from lanediff.encoder import EncoderConfig, StateEncoder
from lanediff.metrics import aggregate
from lanediff.seeding import rng_stream
from lanediff.sim import HighwaySim, ScenarioConfig
from lanediff.world_model import OracleWorldModel


def build(seed, lr, T=10, kind="cosine", train_encoder=False, width=32, layout="random",
          num_traffic=0, route=100.0, lane_half=3.0, batch=32):
    sim = HighwaySim(ScenarioConfig(route_length_m=route, num_traffic=num_traffic,
                                    obstacle_layout=layout, seed=seed,
                                    lane_half_width_m=lane_half))
    enc = StateEncoder(EncoderConfig(), raster_px=32, rng=rng_stream(seed, "enc"))
    net = DenoiserNet(9, 11, 32, rng=rng_stream(seed, "pol"), width=width, d_cond=64,
                      d_time=32)
    pol = DiffusionPolicy(net, make_schedule(T, kind=kind))
    wm = OracleWorldModel(sim)
    tr = PolicyTrainer(sim=sim, policy=pol, encoder=enc, world_model=wm,
                       hyper=TrainerHyper(batch_size=batch, lr=lr),
                       rng=rng_stream(seed, "train"), train_encoder=train_encoder,
                       plan_stride=1)
    return sim, enc, pol, tr


def evaluate(sim, pol, enc, seed, n=10):
    logs = []
    for ep in range(n):
        rng = rng_stream(seed, "eval", ep)
        logs.append(plan_and_run_episode(sim, pol, enc, rng, plan_stride=1))
    rep = aggregate(logs)
    return rep


def main():
    seed = int(sys.argv[1])
    lr = float(sys.argv[2])
    total = int(sys.argv[3])
    kind = sys.argv[4] if len(sys.argv) > 4 else "cosine"
    tren = len(sys.argv) > 5 and sys.argv[5] == "enc"
    sim, enc, pol, tr = build(seed, lr, kind=kind, train_encoder=tren)
    t0 = time.time()
    done_at = None
    for block in range(total // 50):
        tr.run(50)
        rep = evaluate(sim, pol, enc, seed)
        mr = np.mean([s.mean_return for s in tr.history[-50:]])
        print(f"it {len(tr.history):4d}  return {mr:7.3f}  SR {rep.success_rate_pct:5.1f}  "
              f"RC {rep.route_completion_pct:5.1f}  t {time.time()-t0:6.1f}s", flush=True)
        if rep.success_rate_pct == 100.0 and done_at is None:
            done_at = len(tr.history)
            print(f"  -> full success at {done_at} iterations")
            break


if __name__ == "__main__":
    main()
