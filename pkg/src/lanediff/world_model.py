"""World models: predict rewards, continuation, and future frames for a
candidate action trajectory.

Two interchangeable routes exist behind one interface. The oracle clones
the simulator state and rolls the actions for exact answers; it isolates
policy training from model error and anchors every learned-model test.
The learned model conditions a single-pass (non-autoregressive) frame
predictor on tokenized context frames and a frequency-domain encoding of
the trajectory, then applies reward/continuation heads to state
embeddings recomputed from the predicted frames.

Discounts are cumulative: discount[t] = gamma_base^(t+1) times the
(exact or predicted) probability that the episode is still alive after
future step t+1, so a return is just sum(discounts * rewards).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import ObsHistory, StateEncoder
from .sim import HighwaySim, SimError, action_value, nearest_bin

GAMMA_BASE = 0.99
ACTION_LIMIT_M = 0.5


class WorldModelError(RuntimeError):
    pass


# ---- trajectory encoding -----------------------------------------------------


def fft_encode(delta_y, horizon=None):
    """One-sided DFT of a lateral-offset sequence.

    Layout: real parts of coefficients 0..m followed by imaginary parts
    of 1..m, with m = ceil(H/2); length 2m+1. The leading entry is the
    plain sum of the sequence. Linear in the input.
    """
    x = np.asarray(delta_y, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("trajectory must be one-dimensional")
    if horizon is not None and len(x) != horizon:
        raise ValueError(f"trajectory length {len(x)} != horizon {horizon}")
    h = len(x)
    m = math.ceil(h / 2)
    spec = np.fft.fft(x)
    return np.concatenate([spec[: m + 1].real, spec[1 : m + 1].imag])


def fft_decode(coefficients, horizon):
    """Invert fft_encode (the retained coefficients determine the sequence)."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    m = math.ceil(horizon / 2)
    if len(coefficients) != 2 * m + 1:
        raise ValueError(f"expected {2 * m + 1} coefficients, got {len(coefficients)}")
    re = coefficients[: m + 1]
    im = np.concatenate([[0.0], coefficients[m + 1 :]])
    spec = re + 1j * im
    return np.fft.irfft(spec[: horizon // 2 + 1], n=horizon)


def fft_encoding_length(horizon):
    return 2 * math.ceil(horizon / 2) + 1


def sinusoidal_encode(delta_y, n_freqs=4):
    """Per-element sin/cos features; alternative trajectory conditioning."""
    x = np.asarray(delta_y, dtype=np.float64)
    ks = np.arange(1, n_freqs + 1)
    args = np.pi * x[:, None] * ks[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).reshape(-1)


def validate_trajectory(delta_y, horizon):
    x = np.asarray(delta_y, dtype=np.float64)
    if x.shape != (horizon,):
        raise ValueError(f"trajectory must have shape ({horizon},), got {x.shape}")
    if np.any(np.abs(x) > ACTION_LIMIT_M + 1e-9):
        raise ValueError("lateral offsets must lie in [-0.5, +0.5] m")
    return x


# ---- prediction record ----------------------------------------------------------


@dataclass
class WorldModelPrediction:
    future_obs: np.ndarray        # (H, 1, px, px)
    rewards: np.ndarray           # (H,)
    discounts: np.ndarray         # (H,) cumulative, in [0, 1]
    continuation: np.ndarray      # (H,) P(alive after step), in [0, 1]


def cumulative_discounts(continuation, gamma_base=GAMMA_BASE):
    t = np.arange(1, len(continuation) + 1)
    return gamma_base**t * np.asarray(continuation)


# ---- oracle route ------------------------------------------------------------------


class OracleWorldModel:
    """Exact world model: clone the simulator and roll the actions."""

    kind = "oracle"

    def __init__(self, sim: HighwaySim, gamma_base=GAMMA_BASE):
        self.sim = sim
        self.gamma_base = gamma_base

    def predict_state(self, state, delta_y, with_obs=True) -> WorldModelPrediction:
        """Roll H continuous offsets (snapped to the nearest bin) from a live state."""
        if state.done:
            raise WorldModelError("cannot predict from a finished state")
        delta_y = np.asarray(delta_y, dtype=np.float64)
        h = len(delta_y)
        clone = self.sim.clone_state(state)
        px = self.sim.config.raster_px
        obs = np.zeros((h, 1, px, px), dtype=np.float32)
        rewards = np.zeros(h)
        alive = np.zeros(h)
        last_obs = None
        for t in range(h):
            if clone.done:
                if with_obs and last_obs is not None:
                    obs[t] = last_obs
                continue
            out = self.sim.step(clone, nearest_bin(float(delta_y[t])), render=with_obs)
            rewards[t] = out.reward
            alive[t] = 0.0 if out.done else 1.0
            if with_obs:
                obs[t] = out.observation
                last_obs = out.observation
        discounts = cumulative_discounts(alive, self.gamma_base)
        return WorldModelPrediction(obs, rewards, discounts, alive)


def oracle_predict(sim: HighwaySim, state, traj, gamma_base=GAMMA_BASE):
    """Functional form of the oracle route."""
    return OracleWorldModel(sim, gamma_base).predict_state(state, traj)


# ---- learned route --------------------------------------------------------------------


@dataclass
class WorldModelConfig:
    horizon: int = 9
    bins: int = 11
    gamma_base: float = GAMMA_BASE
    d_joint: int = 128
    d_traj: int = 32
    d_head: int = 64
    traj_encoding: str = "dft"      # or "sinusoidal"
    sin_freqs: int = 4


class LearnedWorldModel(nn.Module):
    """Single-pass frame predictor plus reward/continuation heads.

    All H future frames come out of one joint decoder conditioned on the
    clean context frames and the trajectory encoding; nothing is fed back
    autoregressively, so errors cannot compound across the horizon.
    """

    def __init__(self, config: WorldModelConfig, encoder: StateEncoder, rng=None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.encoder = encoder
        ec = encoder.config
        self._dtype = dtype
        self.px = encoder.raster_px
        seq = ec.context_len + 1
        if config.traj_encoding == "dft":
            d_enc = fft_encoding_length(config.horizon)
        elif config.traj_encoding == "sinusoidal":
            d_enc = 2 * config.sin_freqs * config.horizon
        else:
            raise ValueError(f"unknown trajectory encoding '{config.traj_encoding}'")
        self.ctx_proj = nn.Dense(seq * ec.d_model, config.d_joint, rng, dtype=dtype)
        self.traj_proj = nn.Dense(d_enc, config.d_traj, rng, dtype=dtype)
        self.joint = nn.Dense(config.d_joint + config.d_traj, config.d_joint, rng, dtype=dtype)
        self.step_feats = nn.Dense(config.d_joint, config.horizon * config.d_head, rng,
                                   dtype=dtype)
        self.frame_head = nn.Dense(config.d_head, self.px * self.px, rng, dtype=dtype)
        self.head1 = nn.Dense(ec.d_state + config.bins, config.d_head, rng, dtype=dtype)
        self.head2 = nn.Dense(config.d_head, 2, rng, dtype=dtype)

    def encode_trajectory(self, delta_y):
        delta_y = validate_trajectory(delta_y, self.config.horizon)
        if self.config.traj_encoding == "dft":
            return fft_encode(delta_y, self.config.horizon)
        return sinusoidal_encode(delta_y, self.config.sin_freqs)

    def named_parameters(self, prefix=""):
        # encoder parameters are owned (and checkpointed) separately
        out = {}
        for key, mod in vars(self).items():
            if isinstance(mod, nn.Module) and key != "encoder":
                out.update(mod.named_parameters(f"{prefix}.{key}" if prefix else key))
        return out

    # ---- graph forward ---------------------------------------------------

    def forward_graph(self, ctx_frames, traj_matrix, bins_matrix):
        """Differentiable path for a batch.

        ctx_frames: (N, P+1, 1, px, px) array; traj_matrix: (N, H) offsets;
        bins_matrix: (N, H) ints. Returns Tensors (frames (N,H,px,px) in
        [0,1], rewards (N,H), continuation logits (N,H)).
        """
        cfg = self.config
        ec = self.encoder.config
        n = ctx_frames.shape[0]
        seq = ec.context_len + 1
        h = cfg.horizon

        ctx = np.asarray(ctx_frames, dtype=self._dtype)
        ctx_tokens = self.encoder.tokenize(
            Tensor(ctx.reshape(n * seq, 1, self.px, self.px))
        )
        ctx_tokens = ad.reshape(ctx_tokens, (n, seq, ec.d_model))

        enc = np.stack([self.encode_trajectory(traj_matrix[i]) for i in range(n)])
        tfeat = ad.silu(self.traj_proj(Tensor(enc.astype(self._dtype))))
        cfeat = ad.silu(self.ctx_proj(ad.reshape(ctx_tokens, (n, seq * ec.d_model))))
        joint = ad.silu(self.joint(ad.concat([cfeat, tfeat], axis=1)))

        feats = ad.reshape(self.step_feats(joint), (n * h, cfg.d_head))
        frames = ad.sigmoid(self.frame_head(feats))           # (N*H, px*px)
        frames = ad.reshape(frames, (n, h, self.px, self.px))

        # state embeddings along the predicted rollout: window t covers
        # all_tokens[t : t+P+1] over [context, predicted] frames
        pred_tokens = self.encoder.tokenize(
            ad.reshape(frames, (n * h, 1, self.px, self.px))
        )
        pred_tokens = ad.reshape(pred_tokens, (n, h, ec.d_model))
        all_tokens = ad.concat([ctx_tokens, pred_tokens], axis=1)  # (N, P+1+H, d_model)
        windows = ad.concat([all_tokens[:, t : t + seq, :] for t in range(1, h + 1)], axis=0)
        s = self.encoder.encode_tokens(windows)                    # (H*N, d_state)

        onehot = np.zeros((h * n, cfg.bins), dtype=self._dtype)
        flat_bins = np.asarray(bins_matrix, dtype=np.int64).T.reshape(-1)  # t-major
        onehot[np.arange(h * n), flat_bins] = 1.0
        head_in = ad.concat([s, Tensor(onehot)], axis=1)
        out = self.head2(ad.silu(self.head1(head_in)))            # (H*N, 2)
        out = ad.transpose(ad.reshape(out, (h, n, 2)), (1, 0, 2))
        rewards = out[:, :, 0]
        cont_logits = out[:, :, 1]
        return frames, rewards, cont_logits

    # ---- public op ----------------------------------------------------------

    def predict(self, context: ObsHistory, traj) -> WorldModelPrediction:
        """Inference for one context/trajectory pair."""
        delta_y = validate_trajectory(traj, self.config.horizon)
        bins = np.array([nearest_bin(v) for v in delta_y])[None]
        ctx = context.stacked()[None]
        with ad.no_grad():
            frames, rewards, logits = self.forward_graph(ctx, delta_y[None], bins)
            cont = ad.sigmoid(logits)
        continuation = cont.data[0].astype(np.float64)
        return WorldModelPrediction(
            future_obs=frames.data[0][:, None, :, :],
            rewards=rewards.data[0].astype(np.float64),
            discounts=cumulative_discounts(continuation, self.config.gamma_base),
            continuation=continuation,
        )


# ---- loss ------------------------------------------------------------------------------


def wm_loss_graph(pred_frames, pred_rewards, cont_logits, target_obs, target_rewards,
                  target_alive):
    """Training loss on graph tensors; batch-mean of each term.

    obs: mean squared pixel error; reward: sum_t of squared error / 2;
    continuation: sum_t Bernoulli NLL via logits.
    """
    t_obs = Tensor(np.asarray(target_obs, dtype=pred_frames.dtype))
    t_rew = Tensor(np.asarray(target_rewards, dtype=pred_rewards.dtype))
    alive = np.asarray(target_alive, dtype=pred_rewards.dtype)

    diff = pred_frames - t_obs
    obs_loss = ad.mean(diff * diff)
    rdiff = pred_rewards - t_rew
    reward_nll = ad.mean(ad.sum_(rdiff * rdiff * 0.5, axis=1))
    # softplus(l) - a*l == -log Bernoulli(a | sigmoid(l))
    nll = ad.softplus(cont_logits) - cont_logits * Tensor(alive)
    discount_nll = ad.mean(ad.sum_(nll, axis=1))
    total = obs_loss + reward_nll + discount_nll
    return total, obs_loss, reward_nll, discount_nll


# ---- transition data ----------------------------------------------------------


@dataclass
class EpisodeRecord:
    frames: np.ndarray   # (L+1, 1, px, px), frames[0] is the reset observation
    actions: np.ndarray  # (L,) int bins
    rewards: np.ndarray  # (L,)
    alive: np.ndarray    # (L,) 1.0 while the episode continues after the step


class TransitionBuffer:
    """Windows over stored episodes; targets come from real rollouts.

    An anchor (episode, t) supplies the context history ending at frame t
    and the following H actions/frames/rewards/alive flags. Steps past
    the episode end are padded: frozen final frame, zero reward, zero
    alive, center-bin action.
    """

    def __init__(self, horizon, context_len, center_bin=5):
        self.horizon = horizon
        self.context_len = context_len
        self.center_bin = center_bin
        self.episodes: list[EpisodeRecord] = []
        self.anchors: list[tuple[int, int]] = []

    def add_episode(self, frames, actions, rewards, alive):
        ep = EpisodeRecord(
            np.asarray(frames, dtype=np.float32),
            np.asarray(actions, dtype=np.int64),
            np.asarray(rewards, dtype=np.float64),
            np.asarray(alive, dtype=np.float64),
        )
        if len(ep.frames) != len(ep.actions) + 1:
            raise ValueError("episode needs one more frame than actions")
        idx = len(self.episodes)
        self.episodes.append(ep)
        self.anchors.extend((idx, t) for t in range(len(ep.actions)))

    def __len__(self):
        return len(self.anchors)

    def gather(self, anchor_ids):
        """Stack the selected anchors into batch arrays."""
        h, p = self.horizon, self.context_len
        ctx, actions, obs, rewards, alive = [], [], [], [], []
        for a in anchor_ids:
            ep_idx, t = self.anchors[a]
            ep = self.episodes[ep_idx]
            L = len(ep.actions)
            hist = ObsHistory(list(ep.frames[max(0, t - p) : t + 1]), p)
            ctx.append(hist.stacked())
            a_row = np.full(h, self.center_bin, dtype=np.int64)
            o_row = np.zeros((h,) + ep.frames.shape[1:], dtype=np.float32)
            r_row = np.zeros(h)
            c_row = np.zeros(h)
            n_real = min(h, L - t)
            a_row[:n_real] = ep.actions[t : t + n_real]
            o_row[:n_real] = ep.frames[t + 1 : t + 1 + n_real]
            if n_real < h:  # freeze the final frame across the padding
                o_row[n_real:] = ep.frames[t + n_real]
            r_row[:n_real] = ep.rewards[t : t + n_real]
            c_row[:n_real] = ep.alive[t : t + n_real]
            actions.append(a_row)
            obs.append(o_row[:, 0])  # drop the channel axis for the frame loss
            rewards.append(r_row)
            alive.append(c_row)
        return {
            "ctx": np.stack(ctx),
            "actions": np.stack(actions),
            "delta": np.array([[action_value(int(b)) for b in row] for row in actions]),
            "obs": np.stack(obs),
            "rewards": np.stack(rewards),
            "alive": np.stack(alive),
        }

    def sample(self, rng, batch_size):
        ids = rng.integers(0, len(self.anchors), size=batch_size)
        return self.gather(ids)


def collect_transitions(sim: HighwaySim, plan_fn, n_anchors, rng, horizon, context_len,
                        max_episodes=10_000):
    """Fill a TransitionBuffer by rolling episodes with a behavior planner.

    plan_fn(history, rng) returns one or more action bins; the whole plan
    is executed before replanning.
    """
    buf = TransitionBuffer(horizon, context_len)
    episodes = 0
    while len(buf) < n_anchors:
        episodes += 1
        if episodes > max_episodes:
            raise WorldModelError("could not collect enough transitions")
        state, obs = sim.reset()
        frames, actions, rewards, alive = [obs], [], [], []
        while not state.done:
            hist = ObsHistory(frames, context_len)
            plan = np.atleast_1d(np.asarray(plan_fn(hist, rng), dtype=np.int64))
            for b in plan:
                out = sim.step(state, int(b))
                frames.append(out.observation)
                actions.append(int(b))
                rewards.append(out.reward)
                alive.append(0.0 if out.done else 1.0)
                if out.done:
                    break
        buf.add_episode(np.stack(frames), actions, rewards, alive)
    return buf


def random_plan(n_bins, horizon):
    """Uniform-random planner (warm-start data for an untrained policy)."""

    def plan(history, rng):
        return rng.integers(0, n_bins, size=horizon)

    return plan


# ---- training --------------------------------------------------------------------


def train_wm(model: LearnedWorldModel, buffer: TransitionBuffer, steps, rng,
             lr=1e-4, batch_size=32, train_encoder=True):
    """Adam on the combined loss; returns the loss curve as a list of rows
    (step, total, obs, reward, discount)."""
    from .optim import Adam

    if len(buffer) == 0:
        raise WorldModelError("transition buffer is empty")
    params = dict(model.named_parameters())
    if train_encoder:
        params.update(model.encoder.named_parameters("encoder"))
    opt = Adam(params, lr=lr)
    curve = []
    for step in range(int(steps)):
        batch = buffer.sample(rng, batch_size)
        frames, rewards, logits = model.forward_graph(batch["ctx"], batch["delta"],
                                                      batch["actions"])
        total, obs_l, rew_l, disc_l = wm_loss_graph(frames, rewards, logits,
                                                    batch["obs"], batch["rewards"],
                                                    batch["alive"])
        opt.zero_grad()
        total.backward()
        opt.step()
        curve.append((step, float(total.data), float(obs_l.data), float(rew_l.data),
                      float(disc_l.data)))
    return curve


def wm_loss(pred: WorldModelPrediction, target_obs, target_rewards, target_alive):
    """Evaluation form over one prediction; returns (total, breakdown dict)."""
    target_obs = np.asarray(target_obs, dtype=np.float64)
    pred_obs = np.asarray(pred.future_obs, dtype=np.float64)
    if pred_obs.shape != target_obs.shape:
        raise ValueError("observation shapes differ")
    obs_loss = float(np.mean((pred_obs - target_obs) ** 2))
    rdiff = np.asarray(pred.rewards) - np.asarray(target_rewards)
    reward_nll = float(np.sum(0.5 * rdiff**2))
    a = np.asarray(target_alive, dtype=np.float64)
    c = np.clip(np.asarray(pred.continuation, dtype=np.float64), 1e-12, 1 - 1e-12)
    discount_nll = float(-np.sum(a * np.log(c) + (1 - a) * np.log(1 - c)))
    total = obs_loss + reward_nll + discount_nll
    return total, {"obs_loss": obs_loss, "reward_nll": reward_nll,
                   "discount_nll": discount_nll}
