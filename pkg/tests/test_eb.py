import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from gradegap.eb import (
    DiscretePrior,
    GaussianPrior,
    calibrate_penalty,
    default_grid,
    deconvolve,
    fit_gaussian_prior,
    local_modes,
    log_kernel,
    natural_spline_basis,
    penalized_gradient,
    penalized_loglik,
    posterior_mean_deconv,
    shrink,
)
from gradegap.errors import CalibrationError
from gradegap.heterogeneity import VarianceDecomposition, variance_decomposition
from gradegap.synthetic import PriorSpec, generate_gap_estimates

BIMODAL = PriorSpec(kind="mixture", weights=(0.5, 0.5), means=(-0.4, -0.1), sds=(0.05, 0.05))


def _gaps(theta, se):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return pd.DataFrame({"teacher_id": [f"t{j}" for j in range(len(theta))], "theta_hat": theta,
                         "se": np.broadcast_to(se, theta.shape), "n_female": 20, "n_male": 20})


def _decomp(mu, var):
    return VarianceDecomposition("math", mu, var, var, 10, 400, 0.1, 0.1)


# --------------------------------------------------------------------------
# Gaussian prior
# --------------------------------------------------------------------------

def test_gaussian_prior_from_decomposition():
    prior = fit_gaussian_prior(_decomp(-0.2978, 0.0973 ** 2))
    assert prior.mu == -0.2978
    assert prior.phi2 == pytest.approx(0.0973 ** 2, rel=1e-15)


def test_floored_variance_collapses_posteriors_to_mean():
    prior = fit_gaussian_prior(_decomp(-0.3, 0.0))
    assert prior.phi2 == 1e-8
    post = shrink(_gaps([0.5, -1.0, 0.2], 0.1), prior)
    np.testing.assert_allclose(post["theta_star"], -0.3, atol=1e-6)


def test_shrink_hand_example():
    post = shrink(_gaps([0.5], 0.2), GaussianPrior(0.0, 0.01))
    assert post["theta_star"].iloc[0] == pytest.approx(0.1, abs=1e-15)
    assert post["posterior_variance"].iloc[0] == pytest.approx(1 / 125, rel=1e-14)
    assert post["prior_used"].iloc[0] == "gaussian"


def test_shrink_limits():
    precise = shrink(_gaps([0.5], 1e-6), GaussianPrior(0.0, 0.01))
    assert precise["theta_star"].iloc[0] == pytest.approx(0.5, abs=1e-6)
    degenerate = shrink(_gaps([0.5], 0.2), GaussianPrior(-0.1, 1e-14))
    assert degenerate["theta_star"].iloc[0] == pytest.approx(-0.1, abs=1e-6)


def test_shrink_rejects_nonpositive_se():
    with pytest.raises(ValueError, match="strictly positive"):
        shrink(_gaps([0.5, 0.1], np.array([0.1, 0.0])), GaussianPrior(0.0, 0.01))


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(0.01, 1), st.floats(-1, 1), st.floats(1e-4, 1))
def test_posterior_lies_between_estimate_and_mean(theta, s, mu, phi2):
    t = shrink(_gaps([theta], s), GaussianPrior(mu, phi2))["theta_star"].iloc[0]
    lo, hi = min(theta, mu), max(theta, mu)
    assert lo - 1e-12 <= t <= hi + 1e-12
    if theta != mu:
        assert lo < t < hi or abs(theta - mu) < 1e-12
    assert abs(t - mu) <= abs(theta - mu) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=30), st.floats(0.01, 0.5), st.floats(1e-3, 0.5))
def test_shrinkage_preserves_rank_with_equal_se(theta, s, phi2):
    post = shrink(_gaps(theta, s), GaussianPrior(0.0, phi2))["theta_star"].to_numpy()
    order = np.argsort(theta, kind="mergesort")
    assert np.all(np.diff(post[order]) >= -1e-15)


@pytest.mark.parametrize("J", [50, 500])
def test_shrinkage_dominates_raw_mse(J):
    for seed in range(200):
        g = generate_gap_estimates(J, PriorSpec(mean=0.0, sd=0.1), 0.2, seed)
        post = shrink(g, fit_gaussian_prior(variance_decomposition(g)))
        assert np.mean((post["theta_star"] - g["theta"]) ** 2) <= np.mean((g["theta_hat"] - g["theta"]) ** 2)


@pytest.mark.parametrize("J", [10, 20])
def test_small_panel_dominance_fails_only_after_flooring(J):
    violations = []
    for seed in range(200):
        g = generate_gap_estimates(J, PriorSpec(mean=0.0, sd=0.1), 0.2, seed)
        d = variance_decomposition(g)
        post = shrink(g, fit_gaussian_prior(d))
        if np.mean((post["theta_star"] - g["theta"]) ** 2) > np.mean((g["theta_hat"] - g["theta"]) ** 2):
            violations.append((seed, d.floored))
    assert all("weighted" in floored for _, floored in violations)


# --------------------------------------------------------------------------
# deconvolution
# --------------------------------------------------------------------------

def _random_instance(seed, J=60, K=61, p=5):
    rng = np.random.default_rng(seed)
    grid = np.linspace(-1.5, 0.8, K)
    theta = rng.normal(-0.3, 0.2, J)
    s = rng.uniform(0.05, 0.2, J)
    return natural_spline_basis(grid, p), log_kernel(theta, s, grid), rng.standard_normal(p)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    Q, logK, alpha = _random_instance(seed)
    c0 = 0.7
    grad = penalized_gradient(alpha, Q, logK, c0)
    h = 1e-5
    fd = np.array([(penalized_loglik(alpha + h * e, Q, logK, c0) - penalized_loglik(alpha - h * e, Q, logK, c0)) / (2 * h)
                   for e in np.eye(len(alpha))])
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-6 * np.abs(grad).max())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_g_is_probability_vector(alpha):
    grid = default_grid()
    prior = DiscretePrior(grid, natural_spline_basis(grid), np.array(alpha))
    assert np.all(prior.g >= 0)
    assert abs(prior.g.sum() - 1) <= 1e-12


def test_point_mass_recovery():
    grid = default_grid()
    prior = deconvolve(_gaps(np.full(50, -0.3), 0.001), c0=0.0)
    assert prior.converged
    near = np.abs(grid + 0.3) <= (grid[1] - grid[0]) + 1e-12
    assert prior.g[near].sum() >= 0.99


def test_objective_nondecreasing_over_accepted_steps():
    g = generate_gap_estimates(300, BIMODAL, 0.05, 3)
    prior = deconvolve(g, c0=0.5)
    assert prior.converged
    assert np.all(np.diff(prior.trace) >= 0)


def test_grid_must_cover_estimates():
    with pytest.raises(ValueError, match="widen the grid"):
        deconvolve(_gaps([-0.3, 1.7], 0.1), c0=1.0)


def test_basis_needs_two_columns():
    with pytest.raises(ValueError):
        natural_spline_basis(default_grid(), p=1)


def test_bimodal_prior_two_modes():
    g = generate_gap_estimates(2000, BIMODAL, 0.05, 0)
    cal = calibrate_penalty(g, variance_decomposition(g))
    modes = local_modes(cal.prior, min_mass=1e-4)
    assert len(modes) == 2
    np.testing.assert_allclose(np.sort(modes), [-0.4, -0.1], atol=0.03)


def test_affine_basis_reparameterization_invariance():
    grid = default_grid()
    Q = natural_spline_basis(grid)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5)) + 3 * np.eye(5)
    alpha = rng.standard_normal(5)
    a = DiscretePrior(grid, Q, alpha)
    b = DiscretePrior(grid, Q @ A, np.linalg.solve(A, alpha))
    np.testing.assert_allclose(a.g, b.g, rtol=1e-10, atol=1e-15)


def test_fitted_posteriors_invariant_to_rotated_basis():
    # the norm penalty is invariant only under orthogonal A, so the fitted
    # prior is compared across rotations of the basis
    g = generate_gap_estimates(300, PriorSpec(), 0.08, 11)
    grid = default_grid()
    Q = natural_spline_basis(grid)
    R, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((5, 5)))
    a = posterior_mean_deconv(g, deconvolve(g, 1.0, basis=Q))
    b = posterior_mean_deconv(g, deconvolve(g, 1.0, basis=Q @ R))
    np.testing.assert_allclose(a["theta_star"], b["theta_star"], atol=1e-6)


# --------------------------------------------------------------------------
# posterior means under a discrete prior
# --------------------------------------------------------------------------

def _fixed_prior(grid, g):
    # exp(-1e4) underflows to exactly 0, so zero-mass points stay zero
    with np.errstate(divide="ignore"):
        return DiscretePrior(grid, np.eye(len(grid)), np.where(g > 0, np.log(g), -1e4))


def test_point_mass_prior_gives_constant_posterior():
    grid = default_grid()
    g = np.zeros(len(grid))
    g[100] = 1.0
    post = posterior_mean_deconv(_gaps([-1.0, 0.2, 0.9], 0.1), _fixed_prior(grid, g))
    np.testing.assert_allclose(post["theta_star"], grid[100], atol=1e-15)


def test_discretized_gaussian_matches_shrink():
    grid = default_grid()
    mu, phi2 = -0.2978, 0.0973 ** 2
    g = norm.pdf(grid, mu, np.sqrt(phi2))
    g /= g.sum()
    gaps = _gaps(np.linspace(-0.8, 0.2, 25), 0.1)
    a = posterior_mean_deconv(gaps, _fixed_prior(grid, g))["theta_star"]
    b = shrink(gaps, GaussianPrior(mu, phi2))["theta_star"]
    assert np.max(np.abs(a - b)) <= (grid[1] - grid[0]) / 2


def test_far_outside_estimates_stay_in_grid_hull():
    grid = default_grid()
    g = np.full(len(grid), 1 / len(grid))
    post = posterior_mean_deconv(_gaps([-40.0, 35.0], 5.0), _fixed_prior(grid, g))
    assert np.all(np.isfinite(post["theta_star"]))
    assert np.all((post["theta_star"] >= grid[0]) & (post["theta_star"] <= grid[-1]))


def test_kernel_underflow_handled_in_log_space():
    grid = default_grid()
    g = np.full(len(grid), 1 / len(grid))
    # every kernel term underflows in linear space; the nearest grid point takes all mass
    post = posterior_mean_deconv(_gaps([0.99], 1e-4), _fixed_prior(grid, g))
    assert post["theta_star"].iloc[0] == pytest.approx(0.9875, abs=1e-12)


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gaussian_calibration():
    g = generate_gap_estimates(5000, PriorSpec(), 0.03, 7)
    return calibrate_penalty(g, variance_decomposition(g))


def test_calibration_recovers_planted_moments(gaussian_calibration):
    prior = gaussian_calibration.prior
    assert prior.mean() == pytest.approx(-0.2978, rel=0.05)
    assert prior.variance() == pytest.approx(0.0973 ** 2, rel=0.05)


def test_calibration_trace_reports_scan(gaussian_calibration):
    trace = gaussian_calibration.trace
    assert len(trace) == 21 and trace["selected"].sum() == 1
    np.testing.assert_allclose(trace["c0"], 2.0 ** np.linspace(-4, 6, 21))
    best = int(np.flatnonzero(trace["selected"])[0])
    assert gaussian_calibration.c0 == trace["c0"].iloc[best]
    assert np.all(np.diff(trace["error"].to_numpy()[best:]) > 0)
    assert trace["variance"].iloc[-1] > trace["variance"].iloc[best]


def test_single_teacher_cannot_calibrate():
    with pytest.raises(CalibrationError):
        calibrate_penalty(_gaps([-0.3], 0.1), _decomp(-0.3, 0.01))


def test_zero_target_variance_cannot_calibrate():
    with pytest.raises(CalibrationError, match="variance is 0"):
        calibrate_penalty(_gaps([-0.3, -0.2], 0.1), _decomp(-0.25, 0.0))


def test_delta_method_se_shape():
    g = generate_gap_estimates(200, PriorSpec(), 0.05, 2)
    prior = deconvolve(g, 1.0, with_se=True)
    frame = prior.density_frame()
    assert list(frame.columns) == ["grid", "g", "se"]
    assert (frame["se"] >= 0).all() and np.isfinite(frame["se"]).all()
