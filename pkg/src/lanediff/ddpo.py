"""Policy-gradient training of the denoising sampler.

Each reverse-diffusion transition is treated as one action of an inner
MDP whose only reward is the world-model return of the final decoded
trajectory. Training ascends the clipped importance-sampling surrogate:
ratios are exact Gaussian densities of the recorded transitions under
the current vs. the sampling-time parameters, and the gradient flows
only through the log-densities; the world model is an evaluator, never a
differentiation path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .diffusion import DenoisingChain, DiffusionPolicy, decode_trajectory
from .encoder import ObsHistory
from .optim import Adam
from .sim import HighwaySim, action_value
from .world_model import GAMMA_BASE, LearnedWorldModel, OracleWorldModel


class TrainerError(RuntimeError):
    pass


@dataclass
class TrainerHyper:
    clip_epsilon: float = 0.2
    inner_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    reward_norm: str = "batch_standardize"  # or "none"
    gamma_base: float = GAMMA_BASE

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.reward_norm not in ("batch_standardize", "none"):
            raise ValueError(f"unknown reward_norm '{self.reward_norm}'")


@dataclass
class TrainStats:
    iteration: int
    mean_return: float
    std_return: float
    mean_clip_fraction: float
    approx_kl: float
    loss: float

    CSV_COLUMNS = ("iteration", "mean_return", "std_return", "mean_clip_fraction",
                   "approx_kl", "loss")

    def row(self):
        return (self.iteration, self.mean_return, self.std_return,
                self.mean_clip_fraction, self.approx_kl, self.loss)


@dataclass
class Context:
    """A policy query point: observation history plus the matching
    simulator state (the oracle route re-simulates from it)."""

    history: ObsHistory
    sim_state: object = None


@dataclass
class RolloutSample:
    context: Context
    s0: np.ndarray
    chain: DenoisingChain  # batch dimension 1
    actions: np.ndarray    # (H,) int bins
    r_terminal: float
    advantage: float = 0.0


def cumulative_return(rewards, discounts) -> float:
    """Discount-weighted sum; discounts are cumulative weights."""
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = np.asarray(discounts, dtype=np.float64)
    if rewards.shape != discounts.shape:
        raise ValueError(f"length mismatch: {rewards.shape} vs {discounts.shape}")
    return float(np.dot(discounts, rewards))


def _chain_slice(chain: DenoisingChain, i) -> DenoisingChain:
    return DenoisingChain(
        taus=chain.taus[:, i : i + 1],
        means=chain.means[:, i : i + 1],
        variances=chain.variances,
        logprobs=chain.logprobs[:, i : i + 1],
        ks=chain.ks,
        s0=chain.s0[i : i + 1],
        betas=chain.betas,
    )


def stack_chains(samples) -> DenoisingChain:
    chains = [s.chain for s in samples]
    base = chains[0]
    for c in chains[1:]:
        if not np.array_equal(c.betas, base.betas):
            raise TrainerError("samples mix chains from different schedules")
    return DenoisingChain(
        taus=np.concatenate([c.taus for c in chains], axis=1),
        means=np.concatenate([c.means for c in chains], axis=1),
        variances=base.variances,
        logprobs=np.concatenate([c.logprobs for c in chains], axis=1),
        ks=base.ks,
        s0=np.concatenate([c.s0 for c in chains], axis=0),
        betas=base.betas,
    )


# ---- rollouts ---------------------------------------------------------------


def world_model_returns(world_model, context: Context, delta_y, gamma_base):
    """Evaluate one trajectory through whichever world-model route is active."""
    if isinstance(world_model, OracleWorldModel):
        pred = world_model.predict_state(context.sim_state, delta_y, with_obs=False)
    elif isinstance(world_model, LearnedWorldModel):
        pred = world_model.predict(context.history, delta_y)
    else:  # duck-typed test doubles
        pred = world_model.predict(context, delta_y)
    return pred.rewards, pred.discounts


def rollout(policy: DiffusionPolicy, world_model, encoder, contexts, n_per_context,
            rng, hyper: TrainerHyper):
    """Sample chains for each context and score them with the world model."""
    if n_per_context <= 0 or not contexts:
        return []
    expanded = [c for c in contexts for _ in range(n_per_context)]
    with ad.no_grad():
        s0 = encoder.encode_batch([c.history for c in expanded]).data
    chain = policy.sample_chains(s0, rng)
    bins = decode_trajectory(chain.tau0)  # (N, H)
    samples = []
    for i, ctx in enumerate(expanded):
        delta = np.array([action_value(int(b)) for b in bins[i]])
        rewards, discounts = world_model_returns(world_model, ctx, delta,
                                                 hyper.gamma_base)
        samples.append(
            RolloutSample(
                context=ctx,
                s0=s0[i].copy(),
                chain=_chain_slice(chain, i),
                actions=bins[i].copy(),
                r_terminal=cumulative_return(rewards, discounts),
            )
        )
    return samples


def normalize_advantages(samples, mode="batch_standardize"):
    """Fill sample.advantage in place and return the samples."""
    if not samples:
        raise TrainerError("cannot normalize an empty batch")
    returns = np.array([s.r_terminal for s in samples], dtype=np.float64)
    if mode == "none":
        for s, r in zip(samples, returns):
            s.advantage = float(r)
        return samples
    if len(samples) < 2:
        raise TrainerError("batch standardization needs at least 2 samples")
    mean = returns.mean()
    std = returns.std()
    adv = (returns - mean) / (std + 1e-8)
    for s, a in zip(samples, adv):
        s.advantage = float(a)
    return samples


# ---- loss ---------------------------------------------------------------------


def ddpo_loss(samples, policy, hyper: TrainerHyper, s0_override=None):
    """Clipped importance-sampling surrogate over all samples and steps.

    Returns (loss Tensor, stats dict). Chains must have been generated
    under the parameters whose log-probabilities they store.
    """
    if not samples:
        raise TrainerError("ddpo_loss needs a non-empty batch")
    chain = stack_chains(samples)
    adv = np.array([s.advantage for s in samples], dtype=np.float64)
    returns = np.array([s.r_terminal for s in samples], dtype=np.float64)

    lp_new = policy.logprob_chain(chain, s0_override)          # (N, T) graph
    lp_old = chain.logprobs.T.astype(lp_new.dtype)             # (N, T) constant
    log_ratio = lp_new - Tensor(lp_old)
    ratio = ad.exp(log_ratio)
    a_col = Tensor(np.repeat(adv[:, None], chain.n_transitions, axis=1)
                   .astype(lp_new.dtype))
    clipped = ad.clip(ratio, 1.0 - hyper.clip_epsilon, 1.0 + hyper.clip_epsilon)
    surrogate = ad.minimum(ratio * a_col, clipped * a_col)
    loss = -ad.mean(surrogate)

    lr_data = log_ratio.data
    stats = {
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "mean_clip_fraction": float(
            np.mean(np.abs(ratio.data - 1.0) > hyper.clip_epsilon)
        ),
        "approx_kl": float(0.5 * np.mean(lr_data**2)),
        "loss": float(loss.data),
    }
    return loss, stats


# ---- iteration ---------------------------------------------------------------------


def train_iteration(policy, world_model, encoder, contexts, hyper: TrainerHyper, rng,
                    optimizer: Adam, iteration=0, train_encoder=False):
    """Snapshot, roll out, normalize, and take inner-epoch surrogate steps."""
    theta_old = policy.snapshot()  # sampling happens under these exact values
    samples = rollout(policy, world_model, encoder, contexts, 1, rng, hyper)
    normalize_advantages(samples, hyper.reward_norm)
    stats = None
    for _ in range(hyper.inner_epochs):
        s0_override = None
        if train_encoder:
            s0_override = encoder.encode_batch([s.context.history for s in samples])
        loss, st = ddpo_loss(samples, policy, hyper, s0_override)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        stats = st
    del theta_old
    return TrainStats(iteration, stats["mean_return"], stats["std_return"],
                      stats["mean_clip_fraction"], stats["approx_kl"], stats["loss"])


# ---- environment interaction --------------------------------------------------------


def plan_and_run_episode(sim: HighwaySim, policy, encoder, rng, plan_stride=1,
                         collect=None):
    """Roll one real episode under the policy (receding horizon).

    plan_stride actions of each sampled plan are executed before
    replanning. collect, if given, is a list that receives a Context
    snapshot at every step. Returns the per-step record
    (actions, rewards, infractions, progress).
    """
    from .metrics import EpisodeLog

    state, obs = sim.reset()
    frames = [obs]
    steps = []
    pending = []
    while not state.done:
        hist = ObsHistory(frames, encoder.config.context_len)
        if collect is not None:
            collect.append(Context(history=hist, sim_state=sim.clone_state(state)))
        if not pending:
            with ad.no_grad():
                s0 = encoder.encode(hist).data
            tau0, _ = policy.sample_trajectory(s0, rng)
            pending = list(decode_trajectory(tau0))[: max(1, plan_stride)]
        b = int(pending.pop(0))
        out = sim.step(state, b)
        frames.append(out.observation)
        steps.append((b, out.reward, out.infraction, out.progress_m))
    return EpisodeLog(steps=steps, route_length_m=sim.config.route_length_m,
                      seed=sim.config.seed)


@dataclass
class PolicyTrainer:
    """Outer loop: context harvesting, surrogate iterations, world-model refresh."""

    sim: HighwaySim
    policy: DiffusionPolicy
    encoder: object
    world_model: object
    hyper: TrainerHyper
    rng: np.random.Generator
    train_encoder: bool = False
    plan_stride: int = 1
    context_refresh_every: int = 5
    episodes_per_refresh: int = 1
    max_pool: int = 2048
    wm_refresh_every: int = 0        # learned world model only; 0 disables
    wm_refresh_steps: int = 200
    wm_refresh_transitions: int = 512
    pool: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        params = dict(self.policy.named_parameters())
        if self.train_encoder:
            params.update(self.encoder.named_parameters("encoder"))
        self.optimizer = Adam(params, lr=self.hyper.lr)

    def refresh_contexts(self):
        grabbed = []
        for _ in range(self.episodes_per_refresh):
            plan_and_run_episode(self.sim, self.policy, self.encoder, self.rng,
                                 self.plan_stride, collect=grabbed)
        self.pool.extend(grabbed)
        if len(self.pool) > self.max_pool:
            self.pool = self.pool[-self.max_pool :]

    def refresh_world_model(self):
        from .world_model import collect_transitions, train_wm

        def plan(history, rng):
            with ad.no_grad():
                s0 = self.encoder.encode(history).data
            tau0, _ = self.policy.sample_trajectory(s0, rng)
            return decode_trajectory(tau0)

        buf = collect_transitions(self.sim, plan, self.wm_refresh_transitions,
                                  self.rng, self.world_model.config.horizon,
                                  self.encoder.config.context_len)
        train_wm(self.world_model, buf, self.wm_refresh_steps, self.rng,
                 lr=self.hyper.lr, train_encoder=False)

    def run(self, iterations, callback=None):
        for it in range(iterations):
            if it % self.context_refresh_every == 0 or not self.pool:
                self.refresh_contexts()
            if (self.wm_refresh_every and isinstance(self.world_model, LearnedWorldModel)
                    and it % self.wm_refresh_every == 0):
                self.refresh_world_model()
            picks = self.rng.integers(0, len(self.pool), size=self.hyper.batch_size)
            contexts = [self.pool[i] for i in picks]
            stats = train_iteration(self.policy, self.world_model, self.encoder,
                                    contexts, self.hyper, self.rng, self.optimizer,
                                    iteration=it, train_encoder=self.train_encoder)
            self.history.append(stats)
            if callback is not None and callback(it, stats):
                break
        return self.history


# ---- one-step scalar fixture ----------------------------------------------------------


class BanditPolicy:
    """Degenerate one-transition chain: tau^0 ~ N(mu, sigma^2), scalar.

    The reverse step's output distribution is an explicit Gaussian whose
    mean is the single trainable parameter, so the surrogate's gradient
    has a closed form to compare against.
    """

    def __init__(self, sigma=0.5, mu0=0.0, dtype=np.float64):
        self.sigma = float(sigma)
        self.mu = nn.Parameter(np.array([mu0], dtype=dtype))
        self._betas = np.array([0.999])
        self._dtype = dtype

    def named_parameters(self):
        return {"mu": self.mu}

    def snapshot(self):
        return {"mu": self.mu.data.copy()}

    def restore(self, arrays):
        self.mu.data = arrays["mu"].copy()

    def sample_chains(self, n, rng) -> DenoisingChain:
        var = self.sigma**2
        taus = np.empty((2, n, 1, 1))
        taus[0] = rng.standard_normal((n, 1, 1))
        mean = np.full((1, n, 1, 1), float(self.mu.data[0]))
        taus[1] = mean[0] + self.sigma * rng.standard_normal((n, 1, 1))
        with ad.no_grad():
            lp = ad.gaussian_log_prob(taus[1], Tensor(mean[0]), var, batch_axes=1).data
        return DenoisingChain(
            taus=taus, means=mean, variances=np.array([var]),
            logprobs=lp[None, :], ks=np.array([1]),
            s0=np.zeros((n, 1)), betas=self._betas.copy(),
        )

    def logprob_chain(self, chain: DenoisingChain, s0_override=None):
        if not np.array_equal(chain.betas, self._betas):
            raise TrainerError("chain was generated by a different bandit policy")
        n = chain.batch
        ones = Tensor(np.ones((n, 1, 1), dtype=self._dtype))
        mean = ones * ad.reshape(self.mu, (1, 1, 1))
        lp = ad.gaussian_log_prob(chain.taus[1], mean, self.sigma**2, batch_axes=1)
        return ad.reshape(lp, (n, 1))


@dataclass
class BanditTask:
    """Reward -(tau0 - c)^2; analytic dE[r]/dmu = -2(mu - c)."""

    target_c: float
    policy: BanditPolicy

    def reward(self, tau0):
        return -((float(tau0) - self.target_c) ** 2)

    def closed_form_grad(self, mu=None):
        mu = float(self.policy.mu.data[0]) if mu is None else mu
        return -2.0 * (mu - self.target_c)

    def make_samples(self, n, rng):
        chain = self.policy.sample_chains(n, rng)
        samples = []
        for i in range(n):
            r = self.reward(chain.tau0[i, 0, 0])
            samples.append(
                RolloutSample(context=Context(history=None), s0=np.zeros(1),
                              chain=_chain_slice(chain, i), actions=np.zeros(1, int),
                              r_terminal=r)
            )
        return samples


def bandit_fixture(target_c, sigma=0.5, mu0=0.0) -> BanditTask:
    return BanditTask(target_c=float(target_c), policy=BanditPolicy(sigma, mu0))


def train_bandit(task: BanditTask, iterations, rng, hyper=None, lr=0.02, batch=64):
    """DDPO iterations on the scalar fixture; returns mean-return history."""
    hyper = hyper or TrainerHyper(lr=lr, batch_size=batch)
    opt = Adam(task.policy.named_parameters(), lr=hyper.lr)
    returns = []
    for _ in range(iterations):
        samples = task.make_samples(hyper.batch_size, rng)
        normalize_advantages(samples, hyper.reward_norm)
        loss, stats = ddpo_loss(samples, task.policy, hyper)
        opt.zero_grad()
        loss.backward()
        opt.step()
        returns.append(stats["mean_return"])
    return returns
