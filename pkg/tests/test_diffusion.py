import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_anomaly.diffusion import (
    build_schedule,
    forward_diffuse,
    posterior_mean_from_x0,
    posterior_params,
)
from latent_anomaly.errors import ConfigurationError, UndefinedStepError


def test_schedule_first_step(sched):
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert sched.beta_tilde[1] == 0.0


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.beta[1:].tolist() == [0.5]
    assert s.alpha_bar[1:].tolist() == [0.5]


def test_alpha_bar_matches_extended_precision_product(sched):
    mpmath.mp.dps = 50
    prod = mpmath.mpf(1)
    for t in range(1, 1001):
        beta = mpmath.mpf("1e-4") + mpmath.mpf(t - 1) / 999 * (mpmath.mpf("0.02") - mpmath.mpf("1e-4"))
        prod *= 1 - beta
    assert abs(sched.alpha_bar[1000] - float(prod)) < 1e-10
    assert sched.alpha_bar[1000] == pytest.approx(float(prod), rel=1e-10)


def test_schedule_invariants(sched):
    b = sched.beta[1:]
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(b) > 0)
    ab = sched.alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < ab[1] < 1
    np.testing.assert_allclose(ab + (1 - ab), 1.0, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(sched.alpha, 1 - sched.beta)


def test_schedule_is_immutable(sched):
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.5


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule_parameters(args):
    with pytest.raises(ConfigurationError):
        build_schedule(*args)


def test_forward_t0_is_identity(sched, rng):
    z0 = rng.standard_normal(8)
    np.testing.assert_array_equal(forward_diffuse(z0, 0, rng.standard_normal(8), sched), z0)


def test_forward_zero_noise(sched, rng):
    z0 = rng.standard_normal(8)
    out = forward_diffuse(z0, 500, np.zeros(8), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[500]) * z0, rtol=1e-15)


def test_forward_hand_case(sched):
    out = forward_diffuse(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), sched)
    np.testing.assert_allclose(out, [np.sqrt(0.9999), 0.01], rtol=1e-12)
    assert out[0] == pytest.approx(0.99995, abs=1e-8)


def test_forward_out_of_range(sched):
    with pytest.raises(IndexError):
        forward_diffuse(np.zeros(2), 1001, np.zeros(2), sched)
    with pytest.raises(IndexError):
        forward_diffuse(np.zeros(2), -1, np.zeros(2), sched)


def test_forward_batched_timesteps(sched, rng):
    z0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    t = np.array([0, 1, 10, 500, 1000])
    out = forward_diffuse(z0, t, eps, sched)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(out[i], forward_diffuse(z0[i], int(ti), eps[i], sched), rtol=1e-15)


def test_posterior_t1_deterministic(sched, rng):
    _, var = posterior_params(rng.standard_normal(4), rng.standard_normal(4), 1, sched)
    assert var == 0.0


def test_posterior_zero_prediction(sched, rng):
    z = rng.standard_normal(4)
    mean, _ = posterior_params(z, np.zeros(4), 300, sched)
    np.testing.assert_allclose(mean, z / np.sqrt(sched.alpha[300]), rtol=1e-15)


def test_posterior_t0_undefined(sched):
    with pytest.raises(UndefinedStepError):
        posterior_params(np.zeros(2), np.zeros(2), 0, sched)


def _mu_tilde(z_t, eps_hat, t, sched):
    # independent route: recover z0, then the clean-sample form of the posterior mean
    ab = sched.alpha_bar[t]
    z0 = (z_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
    return posterior_mean_from_x0(z_t, z0, t, sched)


def test_posterior_two_parameterizations_t500(sched, rng):
    z_t, eps_hat = rng.standard_normal(8), rng.standard_normal(8)
    mean, var = posterior_params(z_t, eps_hat, 500, sched)
    np.testing.assert_allclose(mean, _mu_tilde(z_t, eps_hat, 500, sched), rtol=1e-12)
    assert var == pytest.approx(sched.beta_tilde[500])


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**32 - 1))
def test_posterior_equivalence_property(sched, t, seed):
    r = np.random.default_rng(seed)
    z0, eps = r.standard_normal(6), r.standard_normal(6)
    z_t = forward_diffuse(z0, t, eps, sched)
    mean, _ = posterior_params(z_t, eps, t, sched)
    ref = posterior_mean_from_x0(z_t, z0, t, sched)
    np.testing.assert_allclose(mean, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


@pytest.mark.parametrize("t", [1, 100, 500, 1000])
def test_forward_marginal_statistics(sched, t):
    r = np.random.default_rng(t)
    N = 10_000
    z0 = np.array([1.5, -0.5, 0.0, 2.0])
    out = forward_diffuse(np.broadcast_to(z0, (N, 4)), t, r.standard_normal((N, 4)), sched)
    ab = sched.alpha_bar[t]
    assert np.all(np.abs(out.mean(0) - np.sqrt(ab) * z0) <= 4 * np.sqrt((1 - ab) / N))
    np.testing.assert_allclose(out.var(0), 1 - ab, rtol=0.10)


def test_monotone_corruption(sched):
    r = np.random.default_rng(7)
    z0 = np.full((1000, 8), 0.7)
    dists = []
    for t in range(100, 1001, 100):
        zt = forward_diffuse(z0, t, r.standard_normal(z0.shape), sched)
        dists.append(np.mean(np.sum((zt - z0) ** 2, axis=1)))
    assert all(b >= a for a, b in zip(dists, dists[1:]))
