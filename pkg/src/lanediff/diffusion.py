"""Denoising diffusion policy over one-hot action trajectories.

The policy is a matrix-valued sampler: starting from Gaussian noise of
shape (horizon, bins), a noise-prediction network conditioned on the
state embedding is applied through a fixed variance schedule, and the
final matrix decodes to discrete lateral actions by per-row argmax. Each
reverse transition is an explicit Gaussian with fixed variance, so the
chain carries exact per-step log-probabilities; this is what makes the
sampler trainable with likelihood-ratio policy gradients.

Diffusion steps are indexed k = T..1; arrays are stored 0-based with
entry i describing step k = i + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

REF_STEPS = 1000      # canonical step count the default beta range refers to
REF_BETA_MIN = 1e-4
REF_BETA_MAX = 2e-2
BETA_CAP = 0.999
VARIANCE_FLOOR = 1e-8  # final reverse step has zero posterior variance otherwise
X0_CLAMP = 2.0         # predicted clean trajectories clamped to [-2, 2]


class ScheduleMismatch(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray  # zero at k=1; floor applied at sampling time
    kind: str = "linear"

    def beta(self, k):
        return float(self.betas[k - 1])

    def alpha(self, k):
        return float(self.alphas[k - 1])

    def alpha_bar(self, k):
        return float(self.alpha_bars[k - 1])

    def alpha_bar_prev(self, k):
        return float(self.alpha_bars[k - 2]) if k >= 2 else 1.0

    def sampling_variance(self, k):
        """Reverse-transition variance actually used for sampling.

        The derived posterior variance is identically zero at k=1; as in
        standard DDPM implementations it is replaced there by the first
        positive entry (k=2's value). An absolute floor keeps the T=1
        degenerate schedule finite. Without this, the k=1 transition is a
        near-delta whose score estimator injects noise amplified by
        1/variance and measurably stalls policy training.
        """
        var = float(self.posterior_variances[k - 1])
        if k == 1 and self.T >= 2:
            var = float(self.posterior_variances[1])
        return max(var, VARIANCE_FLOOR)

    def same_as(self, other) -> bool:
        return self.T == other.T and np.array_equal(self.betas, other.betas)


def make_schedule(T, beta_min=None, beta_max=None, kind="linear") -> NoiseSchedule:
    """Variance schedule for T steps.

    When beta bounds are omitted, the canonical per-kilostep range
    (1e-4, 2e-2) is rescaled by 1000/T (capped at 0.999) so that
    alpha_bar_T stays near zero for any T; explicit bounds are used
    literally. kind "cosine" derives betas from the squared-cosine
    alpha-bar curve and ignores the bounds.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    scale = REF_STEPS / T
    if beta_min is None:
        beta_min = min(REF_BETA_MIN * scale, BETA_CAP)
    if beta_max is None:
        beta_max = min(REF_BETA_MAX * scale, BETA_CAP)
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"invalid beta bounds ({beta_min}, {beta_max})")

    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_max])
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1) / T
        f = np.cos((ts + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, BETA_CAP)
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    post_var = (1.0 - prev) / (1.0 - alpha_bars) * betas
    sched = NoiseSchedule(T, betas, alphas, alpha_bars, post_var, kind)
    if not np.all(np.diff(alpha_bars) < 0):
        raise ValueError("alpha_bars must be strictly decreasing")
    return sched


def q_sample(tau0, k, schedule: NoiseSchedule, noise):
    """Forward-noising: sqrt(abar_k) tau0 + sqrt(1-abar_k) noise."""
    if not 1 <= k <= schedule.T:
        raise ValueError(f"k={k} outside [1, {schedule.T}]")
    tau0 = np.asarray(tau0)
    noise = np.asarray(noise)
    if noise.shape != tau0.shape:
        raise ValueError("noise shape must match tau0")
    ab = schedule.alpha_bar(k)
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * noise


# ---- denoiser network -------------------------------------------------------


class _FiLMResBlock(nn.Module):
    """Temporal conv residual block with feature-wise conditioning."""

    def __init__(self, channels, d_cond, rng, dtype):
        self.conv1 = nn.Conv1d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.conv2 = nn.Conv1d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.film = nn.Dense(d_cond, 2 * channels, rng, dtype=dtype)
        self.channels = channels

    def forward(self, x, cond):
        h = self.conv1(x)
        sc = self.film(cond)  # (N, 2C)
        scale = ad.reshape(sc[:, : self.channels], (x.shape[0], self.channels, 1))
        shift = ad.reshape(sc[:, self.channels :], (x.shape[0], self.channels, 1))
        h = h * (scale + 1.0) + shift
        h = self.conv2(ad.silu(h))
        return x + h


class DenoiserNet(nn.Module):
    """Predicts the injected noise for a (horizon, bins) matrix.

    Temporal 1D-conv pipeline with one down/up level at doubled width;
    conditioning (step embedding + state embedding) enters every residual
    block as a feature-wise scale and shift. The output convolution starts
    near zero so an untrained net predicts almost no noise.
    """

    def __init__(self, horizon, bins, d_state, rng=None, width=32, d_cond=64,
                 d_time=32, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.horizon = horizon
        self.bins = bins
        self.d_time = d_time
        self.cond_time = nn.Dense(d_time, d_cond, rng, dtype=dtype)
        self.cond_state = nn.Dense(d_state, d_cond, rng, dtype=dtype)
        w = width
        self.in_conv = nn.Conv1d(bins, w, 3, rng, padding=1, dtype=dtype)
        self.block1 = _FiLMResBlock(w, d_cond, rng, dtype)
        self.down = nn.Conv1d(w, 2 * w, 3, rng, stride=2, padding=1, dtype=dtype)
        self.block2 = _FiLMResBlock(2 * w, d_cond, rng, dtype)
        self.up_conv = nn.Conv1d(2 * w, w, 3, rng, padding=1, dtype=dtype)
        self.merge = nn.Conv1d(2 * w, w, 3, rng, padding=1, dtype=dtype)
        self.block3 = _FiLMResBlock(w, d_cond, rng, dtype)
        # near-zero output init: the fresh sampler predicts almost no noise
        # while upstream layers still receive gradients from step one
        self.out_conv = nn.Conv1d(w, bins, 3, rng, padding=1, dtype=dtype,
                                  init_scale=1e-2)
        self._dtype = dtype

    def _cond(self, k, s0, batch):
        emb = nn.sinusoidal_embedding([k], self.d_time, dtype=self._dtype)
        emb = Tensor(np.repeat(emb, batch, axis=0))
        return ad.silu(self.cond_time(emb) + self.cond_state(s0))

    def forward(self, tau_k, k, s0):
        """tau_k: (N, H, B) Tensor or array; k: int step; s0: (N, d_state)."""
        x = tau_k if isinstance(tau_k, Tensor) else Tensor(np.asarray(tau_k, dtype=self._dtype))
        if x.ndim != 3 or x.shape[1] != self.horizon or x.shape[2] != self.bins:
            raise ad.ShapeMismatch(
                f"expected (N, {self.horizon}, {self.bins}) trajectories, got {x.shape}"
            )
        s0 = s0 if isinstance(s0, Tensor) else Tensor(np.asarray(s0, dtype=self._dtype))
        cond = self._cond(k, s0, x.shape[0])

        h = ad.transpose(x, (0, 2, 1))  # (N, B, H)
        h = self.in_conv(h)
        skip = self.block1(h, cond)
        h = self.down(skip)
        h = self.block2(h, cond)
        h = self.up_conv(ad.dilate1d(h, 2))
        # dilation maps L -> 2L-1, exact for odd horizons; pad/crop otherwise
        if h.shape[-1] < self.horizon:
            h = ad.pad1d(h, 0, self.horizon - h.shape[-1])
        elif h.shape[-1] > self.horizon:
            h = h[:, :, : self.horizon]
        h = self.merge(ad.concat([h, skip], axis=1))
        h = self.block3(h, cond)
        eps = self.out_conv(h)
        return ad.transpose(eps, (0, 2, 1))  # (N, H, B)


# ---- chains -----------------------------------------------------------------


@dataclass
class DenoisingChain:
    """Full reverse-process record for a batch of sampled trajectories.

    taus[0] is tau^T, taus[T] is tau^0; transition j consumed step
    k = ks[j] and produced taus[j+1] with the stored mean/variance and
    summed Gaussian log-density.
    """

    taus: np.ndarray        # (T+1, N, H, B)
    means: np.ndarray       # (T, N, H, B)
    variances: np.ndarray   # (T,)
    logprobs: np.ndarray    # (T, N)
    ks: np.ndarray          # (T,) = T..1
    s0: np.ndarray          # (N, d_state)
    betas: np.ndarray       # schedule fingerprint

    @property
    def n_transitions(self):
        return len(self.ks)

    @property
    def batch(self):
        return self.taus.shape[1]

    @property
    def tau0(self):
        return self.taus[-1]


def posterior_mean(tau_k, eps_hat, k, schedule: NoiseSchedule):
    """Reverse-transition mean from predicted noise, with the clean-sample clamp.

    Works on Tensors (graph) and plain arrays alike; the two uses must
    share this code path so replayed log-probabilities match sampled ones
    bit for bit.
    """
    ab = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar_prev(k)
    beta = schedule.beta(k)
    alpha = schedule.alpha(k)
    x0 = (tau_k - eps_hat * float(np.sqrt(1.0 - ab))) * float(1.0 / np.sqrt(ab))
    if isinstance(x0, Tensor):
        x0 = ad.clip(x0, -X0_CLAMP, X0_CLAMP)
    else:
        x0 = np.clip(x0, -X0_CLAMP, X0_CLAMP)
    c0 = float(np.sqrt(ab_prev) * beta / (1.0 - ab))
    ck = float(np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab))
    return x0 * c0 + tau_k * ck


class DiffusionPolicy:
    """DenoiserNet + schedule + trajectory geometry; the actor object."""

    def __init__(self, net: DenoiserNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self.horizon = net.horizon
        self.bins = net.bins

    def named_parameters(self):
        return self.net.named_parameters("net")

    def snapshot(self):
        return self.net.state_arrays()

    def restore(self, arrays):
        self.net.load_state_arrays(arrays)

    # ---- sampling ------------------------------------------------------

    def reverse_step(self, tau_k, k, s0, rng):
        """One stochastic reverse transition for a batch (N, H, B).

        Returns (tau_km1, mean, variance, logprob) with logprob summed
        over the matrix entries, one value per batch element.
        """
        if not 1 <= k <= self.schedule.T:
            raise ValueError(f"k={k} outside [1, {self.schedule.T}]")
        tau_k = np.asarray(tau_k, dtype=self.net._dtype)
        squeeze = tau_k.ndim == 2
        if squeeze:
            tau_k = tau_k[None]
            s0 = np.asarray(s0)[None]
        with ad.no_grad():
            eps = self.net(tau_k, k, s0)
            if not np.all(np.isfinite(eps.data)):
                raise ad.NonFiniteValue("denoiser produced non-finite output")
            mean = posterior_mean(Tensor(tau_k), eps, k, self.schedule).data
        var = self.schedule.sampling_variance(k)
        z = rng.standard_normal(mean.shape).astype(mean.dtype)
        tau_km1 = mean + np.sqrt(var) * z
        with ad.no_grad():
            lp = ad.gaussian_log_prob(tau_km1, Tensor(mean), var, batch_axes=1).data
        if squeeze:
            return tau_km1[0], mean[0], var, float(lp[0])
        return tau_km1, mean, var, lp

    def sample_chains(self, s0_batch, rng) -> DenoisingChain:
        """Run the full reverse process for a batch of state embeddings."""
        s0_batch = np.asarray(s0_batch, dtype=self.net._dtype)
        n = s0_batch.shape[0]
        T, H, B = self.schedule.T, self.horizon, self.bins
        taus = np.empty((T + 1, n, H, B), dtype=self.net._dtype)
        means = np.empty((T, n, H, B), dtype=self.net._dtype)
        variances = np.empty(T)
        logprobs = np.empty((T, n))
        taus[0] = rng.standard_normal((n, H, B)).astype(self.net._dtype)
        ks = np.arange(T, 0, -1)
        for j, k in enumerate(ks):
            tau_km1, mean, var, lp = self.reverse_step(taus[j], int(k), s0_batch, rng)
            taus[j + 1] = tau_km1
            means[j] = mean
            variances[j] = var
            logprobs[j] = lp
        return DenoisingChain(taus, means, variances, logprobs, ks,
                              s0_batch.copy(), self.schedule.betas.copy())

    def sample_trajectory(self, s0, rng):
        """Single-state convenience wrapper: returns (tau0 (H,B), chain with N=1)."""
        chain = self.sample_chains(np.asarray(s0)[None], rng)
        return chain.tau0[0], chain

    # ---- replay ---------------------------------------------------------

    def logprob_chain(self, chain: DenoisingChain, s0_override=None):
        """Recompute per-step log-probabilities of a recorded chain under
        the current parameters. Returns a Tensor (N, T) wired into the
        autodiff graph. s0_override (Tensor) substitutes the stored
        conditioning, letting gradients reach an upstream encoder.
        """
        if not np.array_equal(chain.betas, self.schedule.betas):
            raise ScheduleMismatch("chain was generated under a different schedule")
        s0 = s0_override if s0_override is not None else Tensor(chain.s0)
        cols = []
        for j, k in enumerate(chain.ks):
            eps = self.net(chain.taus[j], int(k), s0)
            mean = posterior_mean(Tensor(chain.taus[j]), eps, int(k), self.schedule)
            lp = ad.gaussian_log_prob(chain.taus[j + 1], mean, chain.variances[j],
                                      batch_axes=1)
            cols.append(ad.reshape(lp, (chain.batch, 1)))
        return ad.concat(cols, axis=1)


def decode_trajectory(tau0):
    """Per-row argmax over bins; ties resolve to the lower bin index."""
    tau0 = np.asarray(tau0)
    return np.argmax(tau0, axis=-1).astype(np.int64)


def one_hot_trajectory(bins_seq, n_bins, dtype=np.float32):
    """Integer bins (H,) to a one-hot (H, n_bins) matrix."""
    bins_seq = np.asarray(bins_seq, dtype=np.int64)
    out = np.zeros((len(bins_seq), n_bins), dtype=dtype)
    out[np.arange(len(bins_seq)), bins_seq] = 1.0
    return out
