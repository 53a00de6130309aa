"""Finite-difference suites over every network block and composed loss.

Each suite builds a tiny float64 instance of one block (or a full loss
pipeline), evaluates a scalar probe of its output, and compares analytic
gradients against central differences for a number of random seeds. The
configurations are deliberately minute: the check certifies the
derivative rules, not the production shapes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .ddpo import RolloutSample, Context, TrainerHyper, _chain_slice, ddpo_loss, \
    normalize_advantages
from .diffusion import DenoiserNet, DiffusionPolicy, make_schedule
from .encoder import EncoderConfig, ObsHistory, StateEncoder
from .gradcheck import model_grad_check
from .world_model import LearnedWorldModel, WorldModelConfig, wm_loss_graph

F64 = np.float64


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=F64)


def check_dense(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Dense(4, 3, rng, dtype=F64)
    x = rng.standard_normal((2, 4))
    w = _probe(rng, (2, 3))

    def loss():
        return ad.sum_(layer(Tensor(x, dtype=F64)) * w)

    return model_grad_check(loss, layer.named_parameters())


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Conv1d(2, 3, 3, rng, stride=2, padding=1, dtype=F64)
    x = rng.standard_normal((2, 2, 5))

    def loss():
        return ad.sum_(layer(Tensor(x, dtype=F64)) ** 2.0)

    return model_grad_check(loss, layer.named_parameters())


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Conv2d(1, 2, 3, rng, stride=2, padding=1, dtype=F64)
    x = rng.standard_normal((1, 1, 6, 6))

    def loss():
        return ad.sum_(layer(Tensor(x, dtype=F64)) ** 2.0)

    return model_grad_check(loss, layer.named_parameters())


def check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    layer = nn.LayerNorm(5, dtype=F64)
    layer.gain.data = rng.standard_normal(5)
    layer.bias.data = rng.standard_normal(5)
    x = rng.standard_normal((3, 5))
    w = _probe(rng, (3, 5))

    def loss():
        return ad.sum_(layer(Tensor(x, dtype=F64)) * w)

    return model_grad_check(loss, layer.named_parameters())


def check_attention(seed):
    rng = np.random.default_rng(seed)
    block = nn.CausalSelfAttention(4, 2, rng, dtype=F64)
    x = rng.standard_normal((1, 3, 4))

    def loss():
        return ad.sum_(block(Tensor(x, dtype=F64)) ** 2.0)

    return model_grad_check(loss, block.named_parameters())


def check_transformer_block(seed):
    rng = np.random.default_rng(seed)
    block = nn.TransformerBlock(4, 2, 8, rng, dtype=F64)
    x = rng.standard_normal((1, 3, 4))

    def loss():
        return ad.sum_(block(Tensor(x, dtype=F64)) ** 2.0)

    return model_grad_check(loss, block.named_parameters())


def check_softmax_gaussian(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 4))
    from .gradcheck import grad_check

    e1 = grad_check(lambda x: ad.sum_(ad.softmax(x, axis=-1) ** 2.0), x0)
    sample = rng.standard_normal((2, 4))
    e2 = grad_check(lambda m: ad.gaussian_log_prob(sample, m, 0.5), x0)
    return max(e1, e2)


def _tiny_encoder(seed):
    cfg = EncoderConfig(d_model=4, n_layers=1, n_heads=2, d_ff=4, d_state=2,
                        context_len=1, conv_channels=(1, 1, 1))
    return StateEncoder(cfg, raster_px=4, rng=np.random.default_rng(seed), dtype=F64), cfg


def check_encoder(seed):
    rng = np.random.default_rng(seed)
    enc, cfg = _tiny_encoder(seed)
    frames = [rng.random((1, 4, 4)) for _ in range(cfg.context_len + 1)]
    hist = ObsHistory(frames, cfg.context_len)
    w = _probe(rng, (cfg.d_state,))

    def loss():
        return ad.sum_(enc.encode(hist) * w)

    return model_grad_check(loss, enc.named_parameters())


def _tiny_denoiser(seed, rng):
    net = DenoiserNet(2, 2, 2, rng=np.random.default_rng(seed), width=1, d_cond=2,
                      d_time=2, dtype=F64)
    # zero-init output conv has no gradient signal through itself; nudge it
    net.out_conv.w.data = rng.standard_normal(net.out_conv.w.shape) * 0.1
    return net


def check_denoiser(seed):
    rng = np.random.default_rng(seed)
    net = _tiny_denoiser(seed, rng)
    tau = rng.standard_normal((1, 2, 2))
    s0 = rng.standard_normal((1, 2))

    def loss():
        return ad.sum_(net(tau, 2, Tensor(s0, dtype=F64)) ** 2.0)

    return model_grad_check(loss, net.named_parameters())


def check_wm_loss(seed):
    # encoder parameters are certified by their own suite; this one covers
    # the predictor, heads, and the combined loss with the encoder frozen
    rng = np.random.default_rng(seed)
    enc, ecfg = _tiny_encoder(seed)
    wcfg = WorldModelConfig(horizon=2, bins=3, d_joint=2, d_traj=2, d_head=2)
    wm = LearnedWorldModel(wcfg, enc, rng=np.random.default_rng(seed + 1), dtype=F64)
    ctx = rng.random((1, ecfg.context_len + 1, 1, 4, 4))
    delta = np.array([[0.1, -0.2]])
    bins = np.array([[2, 0]])
    t_obs = rng.random((1, 2, 4, 4))
    t_rew = rng.standard_normal((1, 2))
    t_alive = np.array([[1.0, 0.0]])

    def loss():
        frames, rewards, logits = wm.forward_graph(ctx, delta, bins)
        total, *_ = wm_loss_graph(frames, rewards, logits, t_obs, t_rew, t_alive)
        return total

    return model_grad_check(loss, wm.named_parameters())


def check_ddpo_surrogate(seed):
    rng = np.random.default_rng(seed)
    net = _tiny_denoiser(seed, rng)
    # mild explicit schedule keeps the clean-sample clamp inactive; the
    # floored final-step variance makes the density extremely sharp, so
    # the FD step must be small to stay in the linear regime
    pol = DiffusionPolicy(net, make_schedule(2, 0.03, 0.08))
    chain = pol.sample_chains(rng.standard_normal((3, 2)), np.random.default_rng(seed + 1))
    samples = [
        RolloutSample(context=Context(history=None), s0=chain.s0[i],
                      chain=_chain_slice(chain, i), actions=np.zeros(2, int),
                      r_terminal=float(rng.standard_normal()))
        for i in range(3)
    ]
    normalize_advantages(samples)
    hyper = TrainerHyper(clip_epsilon=0.5)  # every ratio starts strictly interior

    def loss():
        value, _ = ddpo_loss(samples, pol, hyper)
        return value

    return model_grad_check(loss, pol.named_parameters(), epsilon=1e-7)


SUITES = [
    ("dense", check_dense),
    ("conv1d", check_conv1d),
    ("conv2d", check_conv2d),
    ("layer_norm", check_layer_norm),
    ("attention", check_attention),
    ("transformer_block", check_transformer_block),
    ("softmax+gaussian_logprob", check_softmax_gaussian),
    ("state_encoder (composed)", check_encoder),
    ("denoiser_net (composed)", check_denoiser),
    ("world_model_loss (composed)", check_wm_loss),
    ("ddpo_surrogate (composed)", check_ddpo_surrogate),
]


def run_all_suites(seed=0, n_seeds=20):
    """Worst finite-difference error per suite over n_seeds random seeds."""
    results = []
    for name, fn in SUITES:
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(seed + s))
        results.append((name, worst))
    return results
