import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from latent_anomaly.denoiser import AnalyticDenoiser, ArchetypeMixture, ConditionEmbedding
from latent_anomaly.diffusion import posterior_params
from latent_anomaly.errors import InvalidGridError, InvalidStepError
from latent_anomaly.prompting import derive_conditions
from latent_anomaly.sampler import (
    PLMS_COEFFS,
    PlmsState,
    ddpm_step,
    make_grid,
    plms_eps,
    plms_step,
    reconstruct,
    sample,
)
from latent_anomaly.synthdata import gen_patches

NULL1 = ConditionEmbedding.null(1)


def gaussian(mu, sigma2=1.0):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return ArchetypeMixture([1.0], mu[None], np.full((1, mu.size), sigma2), [[1.0]])


# -- grids -----------------------------------------------------------------------


def test_dense_grid():
    assert make_grid(4, 4, 1000).steps.tolist() == [4, 3, 2, 1]


def test_single_step_grid():
    assert make_grid(674, 1, 1000).steps.tolist() == [674]


def test_default_reconstruction_grid():
    steps = make_grid(674, 100, 1000).steps
    assert len(steps) == 100 and steps[0] == 674 and steps[-1] <= 7
    gaps = -np.diff(steps)
    assert np.all(gaps > 0)
    exact = 673 / 99
    assert np.all(np.abs(gaps - exact) <= 1)


@settings(max_examples=300, deadline=None)
@given(data=st.data())
def test_grid_law(data):
    T = data.draw(st.integers(1, 1000))
    t_star = data.draw(st.integers(1, T))
    n = data.draw(st.integers(1, t_star))
    steps = make_grid(t_star, n, T).steps
    assert len(steps) == n
    assert steps[0] == t_star
    assert np.all(np.diff(steps) < 0)
    assert steps[-1] >= 1


@pytest.mark.parametrize("args", [(5, 6, 1000), (0, 1, 1000), (1001, 10, 1000), (10, 0, 1000)])
def test_invalid_grid(args):
    with pytest.raises(InvalidGridError):
        make_grid(*args)


# -- single steps ------------------------------------------------------------------


def test_ddpm_t1_ignores_noise(sched, rng):
    z, e = rng.standard_normal(5), rng.standard_normal(5)
    mean, _ = posterior_params(z, e, 1, sched)
    np.testing.assert_array_equal(ddpm_step(z, 1, e, rng.standard_normal(5) * 100, sched), mean)


def test_ddpm_zero_prediction(sched, rng):
    z = rng.standard_normal(5)
    np.testing.assert_allclose(ddpm_step(z, 600, np.zeros(5), np.zeros(5), sched), z / np.sqrt(sched.alpha[600]),
                               rtol=1e-15)


def test_ddpm_compositional(sched):
    r = np.random.default_rng(0)
    for t in r.integers(2, 1001, 50):
        z, e, n = r.standard_normal((3, 6))
        ab, a = sched.alpha_bar[t], sched.alpha[t]
        mean = (z - (1 - a) / np.sqrt(1 - ab) * e) / np.sqrt(a)
        var = (1 - sched.alpha_bar[t - 1]) / (1 - ab) * (1 - a)
        np.testing.assert_allclose(ddpm_step(z, int(t), e, n, sched), mean + np.sqrt(var) * n, rtol=1e-12, atol=1e-13)


def test_plms_coefficient_rows_sum_to_one():
    for row in PLMS_COEFFS:
        assert sum(row) == pytest.approx(1.0, abs=1e-15)


def test_plms_order4_hand_value():
    state = PlmsState((3.0, 2.0, 1.0))
    assert plms_eps(4.0, state) == pytest.approx(4.5, abs=1e-15)


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_plms_constant_sequence_fixed_point(order):
    e = np.array([0.3, -1.2])
    out = plms_eps(e, PlmsState(tuple(e.copy() for _ in range(order))))
    np.testing.assert_allclose(out, e, rtol=1e-14)


def test_plms_buffer_capacity():
    s = PlmsState()
    for i in range(6):
        s = s.push(float(i))
    assert s.eps == (5.0, 4.0, 3.0, 2.0)


def test_plms_zero_direction_transfer(sched, rng):
    z = rng.standard_normal(4)
    out, _ = plms_step(z, 500, 300, np.zeros(4), PlmsState(), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[300] / sched.alpha_bar[500]) * z, rtol=1e-14)


def test_plms_step_to_clean_endpoint(sched, rng):
    z, e = rng.standard_normal(4), rng.standard_normal(4)
    out, state = plms_step(z, 7, 0, e, PlmsState(), sched)
    ab = sched.alpha_bar[7]
    np.testing.assert_allclose(out, (z - np.sqrt(1 - ab) * e) / np.sqrt(ab), rtol=1e-14)
    assert len(state.eps) == 1


@pytest.mark.parametrize("pair", [(5, 5), (5, 6), (3, -1)])
def test_plms_rejects_non_decreasing_pairs(sched, pair):
    with pytest.raises(InvalidStepError):
        plms_step(np.zeros(2), *pair, np.zeros(2), PlmsState(), sched)


# -- sampling ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def std_samples(sched):
    den = AnalyticDenoiser(gaussian(np.zeros(8)), sched)
    anc = sample(den, NULL1, sched, 100, np.random.default_rng(1), n=5000, method="ancestral")
    plms = sample(den, NULL1, sched, 100, np.random.default_rng(2), n=5000, method="plms")
    return anc, plms


@pytest.mark.parametrize("which", [0, 1])
def test_sample_moments(std_samples, which):
    x = std_samples[which]
    assert np.all(np.abs(x.mean(0)) <= 0.06)
    v = x.var(0)
    assert np.all((v >= 0.9) & (v <= 1.1))


def test_samplers_agree(std_samples):
    anc, plms = std_samples
    assert abs(anc.mean() - plms.mean()) <= 0.05
    assert abs(anc.var(0).mean() - plms.var(0).mean()) <= 0.05


def test_saturated_condition_concentrates(sched):
    mu = np.array([[3.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]])
    mix = ArchetypeMixture([0.5, 0.5], mu, np.full((2, 4), 0.3), np.eye(2), kappa=50.0)
    den = AnalyticDenoiser(mix, sched)
    for k in range(2):
        x = sample(den, ConditionEmbedding(np.eye(2)[k]), sched, 100, np.random.default_rng(k), n=2000)
        assert np.all(np.abs(x.mean(0) - mu[k]) <= 0.1)


def test_sampling_is_deterministic(sched):
    den = AnalyticDenoiser(gaussian([1.0, 2.0]), sched)
    for method in ("plms", "ancestral"):
        a = sample(den, NULL1, sched, 50, np.random.default_rng(5), n=10, method=method)
        b = sample(den, NULL1, sched, 50, np.random.default_rng(5), n=10, method=method)
        np.testing.assert_array_equal(a, b)


def test_unknown_sampler(sched):
    with pytest.raises(InvalidStepError):
        sample(AnalyticDenoiser(gaussian([0.0]), sched), NULL1, sched, 10, np.random.default_rng(), method="euler")


# -- reconstruction ------------------------------------------------------------------


def test_reconstruct_t0_identity(sched, rng):
    z0 = rng.standard_normal((3, 4))
    out = reconstruct(z0, 0, NULL1, None, sched, 100, rng)
    assert out is not z0
    np.testing.assert_array_equal(out, z0)


def test_reconstruct_grid_validation(sched, rng):
    with pytest.raises(InvalidGridError):
        reconstruct(np.zeros(2), 50, NULL1, AnalyticDenoiser(gaussian([0.0, 0.0]), sched), sched, 100, rng)


def test_reconstruct_deterministic(sched):
    den = AnalyticDenoiser(gaussian([1.0, -1.0]), sched)
    z0 = np.array([[0.5, 0.5], [2.0, 1.0]])
    a = reconstruct(z0, 300, NULL1, den, sched, 50, np.random.default_rng(9))
    b = reconstruct(z0, 300, NULL1, den, sched, 50, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_small_t_star_reconstructs_closer(sched):
    mu = np.array([1.0, -0.5, 2.0])
    den = AnalyticDenoiser(gaussian(mu), sched)
    z0 = np.tile(mu, (200, 1))
    err = {}
    for t_star in (50, 674):
        rec = reconstruct(z0, t_star, NULL1, den, sched, 50, np.random.default_rng(t_star))
        err[t_star] = np.linalg.norm(rec - mu, axis=1).mean()
    assert err[50] < 0.5
    assert err[50] <= err[674]


def test_ood_reconstruction_error_dominates(sched, world):
    r = np.random.default_rng(3)
    den = AnalyticDenoiser(world.normal, sched)
    z_in, _ = gen_patches(world.normal, 200, r)
    z_out, _ = gen_patches(world.spec.ood, 200, r)
    errs = []
    for z in (z_in, z_out):
        c, _, _ = derive_conditions(z, world.pool, world.provider, 5)
        rec = reconstruct(z, 674, c, den, sched, 100, r)
        errs.append(np.mean((rec - z) ** 2, axis=1))
    assert mannwhitneyu(errs[1], errs[0], alternative="greater").pvalue < 0.01


def test_reconstruction_error_grows_with_t_star(sched, world):
    r = np.random.default_rng(4)
    den = AnalyticDenoiser(world.normal, sched)
    z, _ = gen_patches(world.normal, 200, r)
    c, _, _ = derive_conditions(z, world.pool, world.provider, 5)
    means = []
    for t_star in (0, 100, 300, 674):
        rec = reconstruct(z, t_star, c, den, sched, min(100, max(t_star, 1)), np.random.default_rng(t_star))
        means.append(np.mean((rec - z) ** 2))
    assert means[0] == 0.0
    assert all(b >= a for a, b in zip(means, means[1:]))
