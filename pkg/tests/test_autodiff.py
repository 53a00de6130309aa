import numpy as np
import pytest

from lanediff import autodiff as ad
from lanediff import nn
from lanediff.autodiff import Tensor
from lanediff.gradcheck import grad_check, model_grad_check
from lanediff.optim import Adam, AdamState, adam_step


def test_dense_identity_passthrough():
    rng = np.random.default_rng(0)
    layer = nn.Dense(3, 3, rng)
    layer.w.data = np.eye(3, dtype=np.float32)
    layer.b.data = np.zeros(3, dtype=np.float32)
    out = layer(Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.data, [1.0, 2.0, 3.0], rtol=0, atol=0)


def test_softmax_uniform_on_equal_inputs():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def _two_layer_net(rng, dtype=np.float32):
    l1 = nn.Dense(4, 8, rng, dtype=dtype)
    l2 = nn.Dense(8, 2, rng, dtype=dtype)

    def f(x):
        return l2(ad.silu(l1(x)))

    return f, {**l1.named_parameters("l1"), **l2.named_parameters("l2")}


def test_forward_deterministic_bit_exact():
    rng = np.random.default_rng(7)
    f, _ = _two_layer_net(rng)
    x = Tensor(np.random.default_rng(1).standard_normal(4).astype(np.float32))
    a = f(x).data
    b = f(x).data
    assert np.array_equal(a, b)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True, dtype=np.float64)
    y = x * x
    y.backward()
    assert x.grad == pytest.approx(6.0)


def test_sum_gradient_all_ones():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(42)
    f, params = _two_layer_net(rng, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal(4)

    def loss():
        return ad.sum_(f(Tensor(x, dtype=np.float64)) ** 2.0)

    assert model_grad_check(loss, params) <= 1e-4


def test_quadratic_form_analytic_gradient():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 5))
    a = (a + a.T) / 2

    def f(x):
        return ad.sum_(x * ad.matmul(Tensor(a, dtype=np.float64), x))

    x0 = rng.standard_normal(5)
    assert grad_check(f, x0, epsilon=1e-5) <= 1e-8
    x = Tensor(x0, requires_grad=True, dtype=np.float64)
    f(x).backward()
    np.testing.assert_allclose(x.grad, 2 * a @ x0, rtol=1e-9)


def test_constant_function_zero_error():
    assert grad_check(lambda x: ad.sum_(x * 0.0), np.ones(3)) == 0.0


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ValueError):
        grad_check(lambda x: x * 2.0, np.ones(3))


def test_backward_requires_graph():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ad.AutodiffError):
        x.backward()


def test_grad_accumulation_is_additive():
    x = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    y = ad.sum_(x * x)
    y.backward()
    once = x.grad.copy()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * once)
    # twice with g equals once with 2g
    x2 = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    y2 = ad.sum_(x2 * x2)
    y2.backward(np.asarray(2.0))
    np.testing.assert_allclose(x2.grad, x.grad)


def test_nonfinite_forward_raises():
    with np.errstate(divide="ignore"):
        with pytest.raises(ad.NonFiniteValue):
            ad.log(Tensor([0.0]))  # -inf


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeMismatch):
        ad.conv1d(Tensor(np.ones((1, 3, 5))), Tensor(np.ones((2, 4, 3))))


ELEMENTWISE_OPS = [
    ("exp", lambda x: ad.sum_(ad.exp(x))),
    ("log", lambda x: ad.sum_(ad.log(x * x + 1.0))),
    ("sqrt", lambda x: ad.sum_(ad.sqrt(x * x + 0.5))),
    ("silu", lambda x: ad.sum_(ad.silu(x) ** 2.0)),
    ("relu", lambda x: ad.sum_(ad.relu(x + 0.3) * x)),
    ("sigmoid", lambda x: ad.sum_(ad.sigmoid(x) * x)),
    ("tanh", lambda x: ad.sum_(ad.tanh(x) * x)),
    ("softmax", lambda x: ad.sum_(ad.softmax(x, axis=-1) ** 2.0)),
    ("mean", lambda x: ad.mean(x * x)),
    ("clip", lambda x: ad.sum_(ad.clip(x, -0.5, 0.5) * x)),
    ("minimum", lambda x: ad.sum_(ad.minimum(x, x * 0.3 + 0.1))),
    ("maximum", lambda x: ad.sum_(ad.maximum(x, x * -0.4))),
    ("getitem", lambda x: ad.sum_(x[1:, :2] * 3.0)),
    ("reshape_t", lambda x: ad.sum_(ad.transpose(ad.reshape(x, (4, 2)), (1, 0)) ** 2.0)),
    ("concat", lambda x: ad.sum_(ad.concat([x, x * 2.0], axis=0) ** 2.0)),
    ("pad", lambda x: ad.sum_(ad.pad1d(x, 1, 2) ** 2.0)),
    ("dilate", lambda x: ad.sum_(ad.dilate1d(x, 2) * 1.5)),
]


@pytest.mark.parametrize("name,fn", ELEMENTWISE_OPS, ids=[n for n, _ in ELEMENTWISE_OPS])
def test_op_gradients_match_fd_many_seeds(name, fn):
    for seed in range(20):
        x0 = np.random.default_rng(seed).standard_normal((2, 4))
        assert grad_check(fn, x0) <= 1e-4, f"{name} failed at seed {seed}"


def test_matmul_gradients_batched_and_plain():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        batched = rng.standard_normal((2, 3, 4))

        assert grad_check(lambda x: ad.sum_(ad.matmul(x, Tensor(b, dtype=np.float64)) ** 2.0), a) <= 1e-4
        assert grad_check(lambda x: ad.sum_(ad.matmul(Tensor(a, dtype=np.float64), x) ** 2.0), b) <= 1e-4
        # broadcast batch @ 2D weight, gradient w.r.t. the weight
        assert (
            grad_check(
                lambda x: ad.sum_(ad.matmul(Tensor(batched, dtype=np.float64), x) ** 2.0), b
            )
            <= 1e-4
        )


def test_conv_and_norm_block_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w1 = Tensor(rng.standard_normal((3, 2, 3)) * 0.5, dtype=np.float64)
        w2 = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, dtype=np.float64)

        x1 = rng.standard_normal((2, 2, 7))
        assert (
            grad_check(lambda x: ad.sum_(ad.conv1d(x, w1, stride=2, padding=1) ** 2.0), x1)
            <= 1e-4
        )
        assert (
            grad_check(
                lambda w: ad.sum_(ad.conv1d(Tensor(x1, dtype=np.float64), w, padding=1) ** 2.0),
                w1.data,
            )
            <= 1e-4
        )

        x2 = rng.standard_normal((1, 1, 6, 6))
        assert (
            grad_check(lambda x: ad.sum_(ad.conv2d(x, w2, stride=2, padding=1) ** 2.0), x2)
            <= 1e-4
        )
        assert (
            grad_check(
                lambda w: ad.sum_(ad.conv2d(Tensor(x2, dtype=np.float64), w, stride=2) ** 2.0),
                w2.data,
            )
            <= 1e-4
        )


def test_layernorm_and_attention_block_gradients():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ln = nn.LayerNorm(6, dtype=np.float64)
        x0 = rng.standard_normal((2, 6))
        assert grad_check(lambda x: ad.sum_(ln(x) * Tensor(np.arange(6.0))), x0) <= 1e-4

        block = nn.TransformerBlock(8, 2, 16, rng, dtype=np.float64)
        probe = rng.standard_normal((1, 3, 8))

        def loss():
            return ad.sum_(block(Tensor(probe, dtype=np.float64)) ** 2.0)

        assert model_grad_check(loss, block.named_parameters()) <= 1e-4


def test_gaussian_log_prob_value_and_gradient():
    # scalar case: known density value
    mean = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    x = np.zeros(2)
    lp = ad.gaussian_log_prob(x, mean, 1.0)
    assert lp.item() == pytest.approx(-np.log(2 * np.pi))
    for seed in range(10):
        rng = np.random.default_rng(seed)
        sample = rng.standard_normal((2, 3))
        var = 0.7
        assert (
            grad_check(lambda m: ad.gaussian_log_prob(sample, m, var), rng.standard_normal((2, 3)))
            <= 1e-4
        )


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(x * x)
    assert not y.requires_grad


# ---- Adam ------------------------------------------------------------


def _param(val):
    p = nn.Parameter(np.asarray(val, dtype=np.float64))
    return p


def test_adam_zero_gradient_keeps_values():
    p = _param([1.0, -2.0])
    p.grad = np.zeros(2)
    state = AdamState()
    adam_step({"p": p}, state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    p = _param([0.5, -0.5, 2.0])
    p.grad = np.array([3.0, -1.0, 0.25])
    adam_step({"p": p}, AdamState(), lr=1e-2)
    update = np.array([0.5, -0.5, 2.0]) - p.data
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(np.abs(update), 1e-2, rtol=1e-6)
    np.testing.assert_array_equal(np.sign(update), np.sign([3.0, -1.0, 0.25]))


def test_adam_state_roundtrip_two_steps():
    rng = np.random.default_rng(11)

    def run(n_steps, p, state):
        for k in range(n_steps):
            p.grad = np.sin(np.arange(4.0) + k)
            adam_step({"p": p}, state, lr=0.05)
        return p.data.copy()

    p1 = _param(np.zeros(4))
    s1 = AdamState()
    run(1, p1, s1)
    saved_p = p1.data.copy()
    saved_s = s1.clone()
    two_direct = run(1, p1, s1)

    p2 = _param(saved_p)
    resumed = run(1, p2, saved_s)
    np.testing.assert_array_equal(two_direct, resumed)


def test_adam_rejects_nonfinite_gradient():
    p = _param([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(ad.AutodiffError):
        adam_step({"p": p}, AdamState(), lr=0.1)
