"""Empirical Bayes denoising of estimated gaps.

Two priors are supported: a Gaussian prior with moment-matched
hyperparameters (closed-form shrinkage), and a discrete prior on a grid whose
log-density is a spline (exponential family, g = softmax(Q alpha)) fitted by
penalized maximum likelihood against the Gaussian noise model
theta_hat_j ~ N(theta_j, s_j^2).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from .errors import CalibrationError
from .heterogeneity import VarianceDecomposition

PHI2_FLOOR = 1e-8
LOG_2PI = np.log(2 * np.pi)


@dataclass
class GaussianPrior:
    mu: float
    phi2: float

    def __post_init__(self):
        if not self.phi2 >= 0:
            raise ValueError("phi2 must be nonnegative")


@dataclass
class DiscretePrior:
    grid: np.ndarray
    basis: np.ndarray
    alpha: np.ndarray
    c0: float = 0.0
    converged: bool = True
    iterations: int = 0
    trace: list = field(default_factory=list)
    se: np.ndarray | None = None

    @property
    def g(self) -> np.ndarray:
        return softmax(self.basis @ self.alpha)

    def mean(self) -> float:
        return float(self.g @ self.grid)

    def variance(self) -> float:
        g = self.g
        m = g @ self.grid
        return float(g @ (self.grid - m) ** 2)

    def density_frame(self) -> pd.DataFrame:
        se = self.se if self.se is not None else np.full(len(self.grid), np.nan)
        return pd.DataFrame({"grid": self.grid, "g": self.g, "se": se})


def fit_gaussian_prior(decomposition: VarianceDecomposition, floor: float = PHI2_FLOOR) -> GaussianPrior:
    """mu from the unadjusted mean, phi^2 from the student-weighted variance."""
    return GaussianPrior(decomposition.unadjusted_mean, max(decomposition.var_weighted, floor))


def _check_se(s: np.ndarray):
    if np.any(~(s > 0)):
        raise ValueError("standard errors must be strictly positive")


def _posterior_frame(gaps, theta_star, post_var, tag):
    out = pd.DataFrame({
        "teacher_id": gaps["teacher_id"].to_numpy(),
        "theta_hat": gaps["theta_hat"].to_numpy(np.float64),
        "se": gaps["se"].to_numpy(np.float64),
        "theta_star": theta_star,
        "posterior_variance": post_var,
        "prior_used": tag,
    })
    if "subject" in gaps:
        out.insert(1, "subject", gaps["subject"].to_numpy())
    return out


def shrink(gaps: pd.DataFrame, prior: GaussianPrior) -> pd.DataFrame:
    """Precision-weighted posterior means under the Gaussian prior.

    Raises:
        ValueError: any s_j <= 0.
    """
    theta = gaps["theta_hat"].to_numpy(np.float64)
    s2 = gaps["se"].to_numpy(np.float64) ** 2
    _check_se(s2)
    if prior.phi2 == 0:
        return _posterior_frame(gaps, np.full_like(theta, prior.mu), np.zeros_like(theta), "gaussian")
    prec = 1.0 / s2 + 1.0 / prior.phi2
    post = (theta / s2 + prior.mu / prior.phi2) / prec
    return _posterior_frame(gaps, post, 1.0 / prec, "gaussian")


# --------------------------------------------------------------------------
# spline basis
# --------------------------------------------------------------------------

def natural_spline_basis(x: np.ndarray, p: int = 5) -> np.ndarray:
    """Natural cubic spline basis with ``p`` columns over ``x``.

    Uses p + 1 equally spaced knots spanning x and the truncated-power
    construction (linear beyond the boundary knots); the constant column is
    dropped since g is invariant to it. Columns are centered and
    orthonormalized so the penalty treats directions evenly.
    """
    if p < 2:
        raise ValueError("basis needs at least 2 columns")
    x = np.asarray(x, dtype=np.float64)
    knots = np.linspace(x.min(), x.max(), p + 1)
    K = len(knots)

    def d(k):
        return (np.maximum(x - knots[k], 0) ** 3 - np.maximum(x - knots[-1], 0) ** 3) / (knots[-1] - knots[k])

    cols = [x] + [d(k) - d(K - 2) for k in range(K - 2)]
    B = np.column_stack(cols)
    B = B - B.mean(axis=0)
    U, sv, _ = np.linalg.svd(B, full_matrices=False)
    return U * np.sqrt(len(x))


def default_grid(lo: float = -2.0, hi: float = 1.0, n: int = 241) -> np.ndarray:
    return np.linspace(lo, hi, n)


# --------------------------------------------------------------------------
# penalized likelihood
# --------------------------------------------------------------------------

def log_kernel(theta_hat: np.ndarray, s: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """log N(theta_hat_j; grid_k, s_j^2), J x K."""
    z = (theta_hat[:, None] - grid[None, :]) / s[:, None]
    return -0.5 * z * z - np.log(s)[:, None] - 0.5 * LOG_2PI


def _loglik_parts(alpha, Q, logK):
    eta = Q @ alpha
    logg = eta - logsumexp(eta)
    lj = logK + logg[None, :]
    logf = logsumexp(lj, axis=1)
    w = np.exp(lj - logf[:, None])
    return np.exp(logg), logf, w


def penalized_loglik(alpha, Q, logK, c0) -> float:
    _, logf, _ = _loglik_parts(alpha, Q, logK)
    return float(np.sum(logf) - c0 * np.linalg.norm(alpha))


def penalized_gradient(alpha, Q, logK, c0) -> np.ndarray:
    """Gradient of the penalized log-likelihood (alpha != 0)."""
    g, _, w = _loglik_parts(alpha, Q, logK)
    grad = Q.T @ (w.sum(axis=0) - len(w) * g)
    nrm = np.linalg.norm(alpha)
    if nrm > 0:
        grad = grad - c0 * alpha / nrm
    return grad


def _derivatives(alpha, Q, logK, c0):
    g, logf, w = _loglik_parts(alpha, Q, logK)
    J = len(w)
    wsum = w.sum(axis=0)
    grad_l = Q.T @ (wsum - J * g)
    WQ = w @ Q
    hess_l = Q.T @ (wsum[:, None] * Q) - WQ.T @ WQ - J * (Q.T @ (g[:, None] * Q) - np.outer(g @ Q, g @ Q))
    nrm = np.linalg.norm(alpha)
    obj = float(np.sum(logf) - c0 * nrm)
    if nrm > 0:
        grad = grad_l - c0 * alpha / nrm
        hess = hess_l - c0 * (np.eye(len(alpha)) / nrm - np.outer(alpha, alpha) / nrm ** 3)
    else:
        # minimal-norm element of the superdifferential at the kink
        gn = np.linalg.norm(grad_l)
        grad = np.zeros_like(grad_l) if gn <= c0 else grad_l * (1 - c0 / gn)
        hess = hess_l
    return obj, grad, hess


def _newton_direction(grad, hess):
    vals, vecs = np.linalg.eigh(-(hess + hess.T) / 2)
    floor = max(1e-10 * max(vals.max(), 1.0), 1e-12)
    vals = np.maximum(vals, floor)
    return vecs @ ((vecs.T @ grad) / vals)


def _validate(gaps, grid):
    theta = gaps["theta_hat"].to_numpy(np.float64)
    s = gaps["se"].to_numpy(np.float64)
    _check_se(s)
    if len(theta) < 2:
        raise ValueError("deconvolution needs at least 2 estimates")
    if theta.min() < grid[0] or theta.max() > grid[-1]:
        raise ValueError(
            f"grid [{grid[0]}, {grid[-1]}] does not cover the estimates "
            f"[{theta.min():.4g}, {theta.max():.4g}]; widen the grid"
        )
    return theta, s


def deconvolve(gaps: pd.DataFrame, c0: float, grid: np.ndarray | None = None, p: int = 5,
               basis: np.ndarray | None = None, tol: float = 1e-8, max_iter: int = 500,
               with_se: bool = False) -> DiscretePrior:
    """Penalized maximum likelihood for a spline exponential-family prior.

    Maximizes sum_j log sum_k g_k N(theta_hat_j; grid_k, s_j^2) - c0 ||alpha||
    from alpha = 0 by damped Newton ascent with backtracking, stopping when
    the gradient max-norm falls below ``tol`` (or, failing that, when the
    Newton decrement is below the objective's rounding level). ``converged`` is False when
    ``max_iter`` is reached. ``trace`` holds the objective at each accepted
    iterate.

    Raises:
        ValueError: the grid does not cover the estimates, or the likelihood
            is not finite.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    Q = natural_spline_basis(grid, p) if basis is None else np.asarray(basis, dtype=np.float64)
    theta, s = _validate(gaps, grid)
    logK = log_kernel(theta, s, grid)
    alpha = np.zeros(Q.shape[1])
    obj, grad, hess = _derivatives(alpha, Q, logK, c0)
    if not np.isfinite(obj):
        raise ValueError("non-finite likelihood; widen the grid")
    logf = _loglik_parts(alpha, Q, logK)[1]
    trace = [obj]
    converged = False
    it = 0
    while it < max_iter:
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        it += 1
        d = _newton_direction(grad, hess)
        slope = float(grad @ d)
        nrm = np.linalg.norm(alpha)
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = alpha + t * d
            logf_c = _loglik_parts(cand, Q, logK)[1]
            # increments summed per teacher stay accurate below the resolution of obj
            gain = float(np.sum(logf_c - logf)) - c0 * (np.linalg.norm(cand) - nrm)
            if np.isfinite(gain) and gain > 0 and gain >= 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no measurable ascent left; converged if the Newton decrement is at rounding level
            converged = bool(np.max(np.abs(grad)) < tol or slope <= 1e-12 * max(1.0, abs(trace[-1])))
            break
        alpha, logf = cand, logf_c
        _, grad, hess = _derivatives(alpha, Q, logK, c0)
        trace.append(trace[-1] + gain)
    else:
        converged = bool(np.max(np.abs(grad)) < tol)
    prior = DiscretePrior(grid=grid, basis=Q, alpha=alpha, c0=c0, converged=converged, iterations=it, trace=trace)
    if with_se:
        prior.se = _delta_se(prior, hess)
    return prior


def _delta_se(prior: DiscretePrior, hess: np.ndarray) -> np.ndarray:
    """Delta-method pointwise standard errors of g from the penalized Hessian."""
    g = prior.g
    cov_alpha = np.linalg.pinv(-(hess + hess.T) / 2)
    D = (np.diag(g) - np.outer(g, g)) @ prior.basis
    return np.sqrt(np.maximum(np.einsum("kp,pq,kq->k", D, cov_alpha, D), 0.0))


def moment_error(prior: DiscretePrior, mu: float, var: float) -> tuple[float, float, float]:
    """Relative squared moment error and the two relative errors.

    The mean's error is scaled by max(|mu|, sqrt(var)) so a target mean near
    zero does not blow the ratio up.
    """
    m, v = prior.mean(), prior.variance()
    rm = abs(m - mu) / max(abs(mu), np.sqrt(var))
    rv = abs(v - var) / var
    return rm * rm + rv * rv, rm, rv


def penalty_grid(lo: float = -4, hi: float = 6, n: int = 21) -> np.ndarray:
    return 2.0 ** np.linspace(lo, hi, n)


@dataclass
class Calibration:
    c0: float
    prior: DiscretePrior
    trace: pd.DataFrame


def calibrate_penalty(gaps: pd.DataFrame, decomposition: VarianceDecomposition, grid: np.ndarray | None = None,
                      p: int = 5, penalties: np.ndarray | None = None, with_se: bool = False) -> Calibration:
    """Scan c0 and keep the prior whose mean and variance best match the
    bias-corrected targets (unadjusted mean, student-weighted variance).

    Raises:
        CalibrationError: no scanned c0 gets both moments within 50%.
    """
    if len(gaps) < 2:
        raise CalibrationError("cannot calibrate with fewer than 2 teachers")
    mu, var = decomposition.unadjusted_mean, decomposition.var_weighted
    if not var > 0:
        raise CalibrationError("bias-corrected variance is 0; nothing to calibrate against")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    Q = natural_spline_basis(grid, p)
    penalties = penalty_grid() if penalties is None else np.asarray(penalties, dtype=np.float64)
    rows, priors = [], []
    for c0 in penalties:
        pr = deconvolve(gaps, float(c0), grid, basis=Q)
        err, rm, rv = moment_error(pr, mu, var)
        rows.append({"c0": float(c0), "mean": pr.mean(), "variance": pr.variance(), "error": err,
                     "rel_mean": rm, "rel_var": rv, "converged": pr.converged, "iterations": pr.iterations})
        priors.append(pr)
    trace = pd.DataFrame(rows)
    ok = np.maximum(trace["rel_mean"], trace["rel_var"]) < 0.5
    if not ok.any():
        raise CalibrationError(
            "no penalty achieves relative moment error below 50%:\n" + trace.to_string(index=False)
        )
    best = int(trace["error"].where(ok).idxmin())
    chosen = priors[best]
    if with_se:
        chosen = deconvolve(gaps, chosen.c0, grid, basis=Q, with_se=True)
    trace["selected"] = np.arange(len(trace)) == best
    return Calibration(float(penalties[best]), chosen, trace)


def posterior_mean_deconv(gaps: pd.DataFrame, prior: DiscretePrior) -> pd.DataFrame:
    """Posterior means and variances under the discrete prior (log-space)."""
    theta = gaps["theta_hat"].to_numpy(np.float64)
    s = gaps["se"].to_numpy(np.float64)
    _check_se(s)
    g = prior.g
    with np.errstate(divide="ignore"):
        logg = np.log(g)
    lj = log_kernel(theta, s, prior.grid) + logg[None, :]
    w = np.exp(lj - logsumexp(lj, axis=1)[:, None])
    m = w @ prior.grid
    v = np.maximum(w @ prior.grid ** 2 - m * m, 0.0)
    return _posterior_frame(gaps, m, v, "deconvolved")


def local_modes(prior: DiscretePrior, min_mass: float = 0.0) -> np.ndarray:
    """Grid points that are strict local maxima of g."""
    g = prior.g
    inner = (g[1:-1] > g[:-2]) & (g[1:-1] >= g[2:]) & (g[1:-1] > min_mass)
    return prior.grid[1:-1][inner]
