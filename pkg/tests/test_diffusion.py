import numpy as np
import pytest

from gmdiff.diffusion import linear_schedule, q_sample, reverse_step


def test_linear_schedule_hand_arithmetic():
    s = linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.beta, [0.1, 0.2], rtol=0, atol=0)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=0, atol=1e-15)


def test_schedule_endpoints_and_monotonicity():
    s = linear_schedule(100, 1e-4, 0.02)
    assert s.beta[0] == 1e-4 and s.beta[-1] == 0.02
    assert (np.diff(s.alpha_bar) < 0).all()
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1.0 - s.beta), rtol=0, atol=1e-12)


def test_schedule_rejects_bad_bounds():
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.3, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(1, 0.1, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.1, 1.0)


def test_q_sample_degenerate_cases():
    s = linear_schedule(50, 1e-3, 0.05)
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(4, 8, 8))
    eps = rng.normal(size=(4, 8, 8))
    t = 17
    np.testing.assert_allclose(q_sample(s, z0, t, np.zeros_like(z0)),
                               np.sqrt(s.alpha_bar[t]) * z0, rtol=0, atol=0)
    np.testing.assert_allclose(q_sample(s, np.zeros_like(z0), t, eps),
                               np.sqrt(1 - s.alpha_bar[t]) * eps, rtol=0, atol=0)
    with pytest.raises(ValueError):
        q_sample(s, z0, t, np.zeros((4, 8)))
    with pytest.raises(ValueError):
        q_sample(s, z0, 50, eps)


def test_q_sample_monte_carlo_variance():
    s = linear_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(1)
    t = 60
    draws = np.array([q_sample(s, np.zeros(4), t, rng.normal(size=4)) for _ in range(10_000)])
    var = draws.var()
    expected = 1.0 - s.alpha_bar[t]
    assert abs(var - expected) / expected < 0.05


def test_reverse_step_posterior_mean_oracle():
    # feed the true noise back in: result must equal the independently
    # coded deterministic formula sqrt(ab_{t-1}) z0 + c_t * eps
    s = linear_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(4, 8, 8))
    for t in range(1, s.T):
        eps = rng.normal(size=z0.shape)
        z_t = q_sample(s, z0, t, eps)
        got = reverse_step(s, z_t, eps, t, np.zeros_like(z0))
        ab_t = s.alpha_bar[t]
        c_t = (np.sqrt(1 - ab_t) - s.beta[t] / np.sqrt(1 - ab_t)) / np.sqrt(s.alpha[t])
        want = np.sqrt(s.alpha_bar[t - 1]) * z0 + c_t * eps
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_reverse_step_recovers_z0_at_last_step():
    s = linear_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=(4, 8, 8))
    eps = rng.normal(size=z0.shape)
    z1 = q_sample(s, z0, 0, eps)
    got = reverse_step(s, z1, eps, 0, np.zeros_like(z0))
    np.testing.assert_allclose(got, z0, rtol=0, atol=1e-9)


def test_reverse_step_rejects_noise_at_t0():
    s = linear_schedule(10, 1e-3, 0.05)
    z = np.ones((2, 2))
    with pytest.raises(ValueError):
        reverse_step(s, z, z, 0, np.ones_like(z))


def test_reverse_step_homogeneous_in_inputs():
    s = linear_schedule(40, 1e-3, 0.03)
    rng = np.random.default_rng(4)
    z = rng.normal(size=(4, 8, 8))
    e = rng.normal(size=z.shape)
    t = 11
    a = 2.75
    left = reverse_step(s, a * z, a * e, t, np.zeros_like(z))
    right = a * reverse_step(s, z, e, t, np.zeros_like(z))
    np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-12)


def test_reverse_step_superposition_without_noise():
    s = linear_schedule(40, 1e-3, 0.03)
    rng = np.random.default_rng(5)
    z1, z2 = rng.normal(size=(2, 4, 8, 8))
    e1, e2 = rng.normal(size=(2, 4, 8, 8))
    t = 23
    zero = np.zeros_like(z1)
    combined = reverse_step(s, z1 + z2, e1 + e2, t, zero)
    split = reverse_step(s, z1, e1, t, zero) + reverse_step(s, z2, e2, t, zero)
    # affine with a constant offset of zero here, so superposition holds
    np.testing.assert_allclose(combined, split, rtol=1e-12, atol=1e-12)
