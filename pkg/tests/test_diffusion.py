"""Schedules, forward/reverse chains, the noise net, and replacement sampling."""

import numpy as np
import pytest

from fedscrub.diffusion import (DiffusionSchedule, NoiseNet, ReparamHeads,
                                diffusion_train_step, forward_step, forward_to,
                                generate_replacement, load_diffusion_model,
                                make_heads, make_schedule, noise_net_forward,
                                reparameterize, reverse_step,
                                save_diffusion_model, train_heads_step)

from conftest import fd_grad, rel_err


class StubNet:
    """Fixed-output noise predictor for closed-form step checks."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def predict(self, x, t):
        return np.broadcast_to(self.value, np.shape(x)).astype(float)


# ---------------------------------------------------------------- schedules

def test_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    assert np.array_equal(s.betas, [0.5])
    assert np.array_equal(s.alpha_bars, [0.5])


def test_schedule_linear_interpolation():
    s = make_schedule(3, 0.1, 0.3)
    assert np.allclose(s.betas, [0.1, 0.2, 0.3], atol=1e-15)


def test_schedule_alpha_bar_hand_product():
    s = make_schedule(3, 0.1, 0.3)
    assert s.alpha_bars[-1] == pytest.approx(0.9 * 0.8 * 0.7, rel=1e-12)
    assert s.alpha_bars[-1] == pytest.approx(0.504, rel=1e-9)


def test_schedule_alpha_bar_is_left_fold_product():
    s = make_schedule(25)
    acc = 1.0
    for i, a in enumerate(s.alphas):
        acc = acc * a
        assert s.alpha_bars[i] == acc   # bit-exact running product


def test_schedule_alpha_bar_strictly_decreasing():
    s = make_schedule(50)
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_schedule_rejects_bad_bounds():
    for steps, lo, hi in [(0, 0.1, 0.2), (3, 0.0, 0.2), (3, 0.3, 0.2), (3, 0.1, 1.0)]:
        with pytest.raises(ValueError):
            make_schedule(steps, lo, hi)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.5, 1.5]))


# ------------------------------------------------------------- forward chain

def test_forward_step_tiny_beta_is_identity():
    s = DiffusionSchedule(np.array([1e-12]))
    x = np.array([1.0, -2.0])
    assert np.allclose(forward_step(x, 1, s, np.zeros(2)), x, atol=1e-9)


def test_forward_step_zero_noise_shrinks():
    s = DiffusionSchedule(np.array([0.19]))
    out = forward_step(np.array([2.0]), 1, s, np.zeros(1))
    assert out[0] == pytest.approx(np.sqrt(0.81) * 2.0, rel=1e-12)


def test_forward_step_hand_value():
    s = DiffusionSchedule(np.array([0.25]))   # alpha = 0.75
    out = forward_step(np.array([2.0]), 1, s, np.array([1.0]))
    assert out[0] == pytest.approx(2.23205, abs=1e-5)


def test_forward_step_rejects_bad_t():
    s = make_schedule(3)
    with pytest.raises(ValueError):
        forward_step(np.zeros(1), 0, s, np.zeros(1))
    with pytest.raises(ValueError):
        forward_step(np.zeros(1), 4, s, np.zeros(1))


def test_forward_to_matches_chained_steps_exactly():
    s = make_schedule(20)
    x0 = np.random.default_rng(4).standard_normal(6)
    z = np.zeros(6)
    for t in (1, 7, 20):
        chained = x0.copy()
        for step in range(1, t + 1):
            chained = forward_step(chained, step, s, z)
        assert np.array_equal(forward_to(x0, t, s, z), chained)


def test_forward_to_at_t1_equals_forward_step():
    s = make_schedule(5)
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal(4)
    z = rng.standard_normal(4)
    assert np.allclose(forward_to(x0, 1, s, z), forward_step(x0, 1, s, z),
                       atol=1e-15)


def test_forward_to_matches_chain_in_distribution():
    # closed form and the step-by-step chain must agree in mean and variance
    s = make_schedule(5, 0.05, 0.3)
    rng = np.random.default_rng(11)
    n = 100_000
    x0 = 1.5
    closed = np.sqrt(s.alpha_bars[-1]) * x0 + \
        np.sqrt(1 - s.alpha_bars[-1]) * rng.standard_normal(n)
    chained = np.full(n, x0)
    for t in range(1, 6):
        chained = np.sqrt(s.alphas[t - 1]) * chained + \
            np.sqrt(1 - s.alphas[t - 1]) * rng.standard_normal(n)
    assert abs(closed.mean() - chained.mean()) < 0.01
    assert abs(closed.var() - chained.var()) / chained.var() < 0.01


# ------------------------------------------------------------ reparametrize

def test_reparameterize_passthrough():
    heads = make_heads(3, sigma_scale=0.0)
    x = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(reparameterize(x, heads, np.ones(3)), x)


def test_reparameterize_zero_z_uses_mean_head():
    heads = ReparamHeads(2.0 * np.eye(2), 0.5 * np.eye(2))
    x = np.array([1.0, 3.0])
    assert np.array_equal(reparameterize(x, heads, np.zeros(2)), [2.0, 6.0])


def test_reparameterize_hand_value():
    heads = ReparamHeads(2.0 * np.eye(2), 0.1 * np.eye(2))
    w = reparameterize(np.array([1.0, 0.0]), heads, np.array([1.0, 1.0]))
    assert np.allclose(w, [2.1, 0.0], atol=1e-12)


def test_reparameterize_rejects_mismatch():
    heads = make_heads(3)
    with pytest.raises(ValueError):
        reparameterize(np.zeros(2), heads, np.zeros(2))
    with pytest.raises(ValueError):
        ReparamHeads(np.eye(2), np.eye(3))


# ----------------------------------------------------------------- noise net

def test_noise_net_zero_weights_zero_output():
    net = NoiseNet(4, 8, 10, seed=0, init_scale=0.0)
    assert np.array_equal(noise_net_forward(net, np.ones(4), 3), np.zeros(4))


def test_noise_net_shape_and_purity():
    net = NoiseNet(6, 16, 50, seed=1)
    x = np.random.default_rng(2).standard_normal(6)
    a = net.predict(x, 7)
    b = net.predict(x, 7)
    assert a.shape == (6,)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        net.predict(np.zeros(5), 7)


def test_noise_net_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = NoiseNet(5, 6, 10, seed=9)   # small widths keep the FD oracle honest
    x = rng.standard_normal((3, 5))
    ts = rng.integers(1, 11, size=3)
    targets = rng.standard_normal((3, 5))
    _, grads = net.loss_and_grads(x, ts, targets)
    for name, param in net.params.items():
        def loss_of(p, name=name, param=param):
            keep = param.copy()
            param[...] = p
            val, _ = net.loss_and_grads(x, ts, targets)
            param[...] = keep
            return val
        assert rel_err(grads[name], fd_grad(loss_of, param.copy())) < 1e-4, name


def test_noise_net_input_vjp_matches_finite_differences():
    rng = np.random.default_rng(13)
    net = NoiseNet(4, 6, 10, seed=21)
    x = rng.standard_normal(4)
    v = rng.standard_normal(4)
    analytic = net.input_vjp(x, 3, v)
    numeric = fd_grad(lambda q: float(net.predict(q, 3) @ v), x.copy())
    assert rel_err(analytic, numeric) < 1e-4


def test_loss_zero_when_prediction_matches_target():
    net = NoiseNet(4, 8, 10, seed=5)
    x = np.random.default_rng(6).standard_normal((2, 4))
    ts = np.array([1, 4])
    out = net.predict_batch(x, ts)
    loss, _ = net.loss_and_grads(x, ts, out)
    assert loss == 0.0


def test_loss_is_per_element_mean():
    net = NoiseNet(2, 4, 10, seed=0, init_scale=0.0)
    net.b3[:] = [0.0, 1.0]            # constant prediction (0, 1)
    loss, _ = net.loss_and_grads(np.zeros((1, 2)), np.array([1]),
                                 np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(1.0, rel=1e-12)


def test_zero_net_loss_near_unit_variance():
    net = NoiseNet(12, 8, 50, seed=1, init_scale=0.0)
    s = make_schedule(50)
    rng = np.random.default_rng(10)
    batch = rng.standard_normal((2048, 12))
    loss = diffusion_train_step(batch, net, s, lr=0.0, rng=rng)
    assert abs(loss - 1.0) < 0.05


def test_train_step_rejects_empty_batch():
    net = NoiseNet(3, 4, 10, seed=0)
    with pytest.raises(ValueError):
        diffusion_train_step(np.zeros((0, 3)), net, make_schedule(10), 0.01,
                             np.random.default_rng(0))


def test_train_step_loss_finite_and_nonnegative():
    net = NoiseNet(6, 16, 20, seed=2)
    s = make_schedule(20)
    rng = np.random.default_rng(3)
    batch = rng.standard_normal((32, 6))
    for _ in range(5):
        loss = diffusion_train_step(batch, net, s, 0.01, rng)
        assert np.isfinite(loss) and loss >= 0.0


# -------------------------------------------------------------- reverse chain

def test_reverse_step_pure_rescale_with_zero_prediction():
    s = DiffusionSchedule(np.array([0.19, 0.19]))
    x = np.array([0.9])
    out = reverse_step(x, 2, StubNet([0.0]), s, np.zeros(1))
    assert out[0] == pytest.approx(0.9 / np.sqrt(0.81), rel=1e-12)


def test_reverse_step_hand_value():
    s = DiffusionSchedule(np.array([0.19]))   # alpha = alpha_bar = 0.81
    out = reverse_step(np.array([0.9]), 1, StubNet([1.0]), s, np.zeros(1))
    assert out[0] == pytest.approx(0.51568, abs=1e-5)


def test_reverse_step_ignores_noise_at_t1():
    s = DiffusionSchedule(np.array([0.19]))
    quiet = reverse_step(np.array([0.9]), 1, StubNet([1.0]), s, np.zeros(1))
    loud = reverse_step(np.array([0.9]), 1, StubNet([1.0]), s, np.full(1, 1e6))
    assert np.array_equal(quiet, loud)


def test_reverse_step_tiny_beta_is_identity():
    s = DiffusionSchedule(np.array([1e-12, 1e-12]))
    x = np.array([1.3, -0.2])
    out = reverse_step(x, 2, StubNet([0.0, 0.0]), s, np.zeros(2))
    assert np.allclose(out, x, atol=1e-6)


def test_reverse_step_inverts_forward_with_oracle_noise():
    # a predictor that returns the exact injected noise undoes t=1 noising
    s = make_schedule(1, 0.09, 0.09)
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal(5)
    z = rng.standard_normal(5)
    x1 = forward_to(x0, 1, s, z)
    back = reverse_step(x1, 1, StubNet(z), s, np.zeros(5))
    assert np.allclose(back, x0, atol=1e-12)


# ---------------------------------------------------------------- generation

def test_generate_identity_limit():
    # vanishing noise rates, identity heads, and a silent net return x0
    s = DiffusionSchedule(np.full(5, 1e-12))
    net = NoiseNet(4, 4, 5, seed=0, init_scale=0.0)
    heads = make_heads(4, sigma_scale=0.0)
    x0 = np.array([1.0, -0.5, 2.0, 0.25])
    out = generate_replacement(x0, net, heads, s, np.random.default_rng(1))
    assert np.allclose(out, x0, atol=1e-4)


def test_generate_deterministic_under_fixed_rng():
    s = make_schedule(10)
    net = NoiseNet(6, 8, 10, seed=3)
    heads = make_heads(6)
    x0 = np.random.default_rng(4).standard_normal(6)
    a = generate_replacement(x0, net, heads, s, np.random.default_rng(55))
    b = generate_replacement(x0, net, heads, s, np.random.default_rng(55))
    assert np.array_equal(a, b)
    assert a.shape == x0.shape


def test_generate_moves_away_from_input():
    s = make_schedule(10)   # default beta floor 1e-4 with real noise draws
    net = NoiseNet(6, 8, 10, seed=3)
    heads = make_heads(6)
    x0 = np.random.default_rng(4).standard_normal(6)
    out = generate_replacement(x0, net, heads, s, np.random.default_rng(9))
    assert float(np.linalg.norm(out - x0)) > 0.0


def test_generate_pure_noise_start_differs():
    s = make_schedule(10)
    net = NoiseNet(6, 8, 10, seed=3)
    heads = make_heads(6)
    x0 = np.random.default_rng(4).standard_normal(6)
    a = generate_replacement(x0, net, heads, s, np.random.default_rng(9), "reparam")
    b = generate_replacement(x0, net, heads, s, np.random.default_rng(9), "pure_noise")
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        generate_replacement(x0, net, heads, s, np.random.default_rng(9), "other")


def test_train_heads_step_reduces_reconstruction_error():
    rng = np.random.default_rng(15)
    s = make_schedule(6, 0.01, 0.05)
    net = NoiseNet(4, 8, 6, seed=8, init_scale=0.1)
    heads = make_heads(4)
    batch = rng.standard_normal((16, 4))
    first = train_heads_step(batch, net, heads, s, 0.01, np.random.default_rng(1))
    for _ in range(30):
        train_heads_step(batch, net, heads, s, 0.01, np.random.default_rng(1))
    last = train_heads_step(batch, net, heads, s, 0.0, np.random.default_rng(1))
    assert last < first


def test_diffusion_checkpoint_roundtrip(tmp_path):
    net = NoiseNet(6, 8, 12, seed=2)
    s = make_schedule(12, 0.001, 0.1)
    save_diffusion_model(net, s, tmp_path / "dm")
    net2, s2 = load_diffusion_model(tmp_path / "dm")
    assert np.allclose(s2.betas, s.betas, rtol=1e-8)
    x = np.random.default_rng(1).standard_normal(6)
    assert np.allclose(net2.predict(x, 5), net.predict(x, 5), rtol=1e-6, atol=1e-9)
