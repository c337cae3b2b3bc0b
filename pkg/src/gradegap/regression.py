"""Linear regression with absorbed fixed effects and cluster-robust covariance.

Fixed effects are projected out by alternating within-group demeaning
(weighted when weights are given). Slopes are solved from the normal
equations with a Cholesky factorization. Covariances are CRVE sandwiches
with the small-sample factor G/(G-1) * (N-1)/(N-K) per cluster dimension;
two-way clustering uses V_1 + V_2 - V_12.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import stats

from .errors import ConvergenceError, RankDeficiencyError

DEMEAN_TOL = 1e-10
DEMEAN_MAX_SWEEPS = 1000


def factorize(*keys) -> np.ndarray:
    """Integer codes for the (possibly composite) key, in sorted key order."""
    if len(keys) == 1:
        codes, _ = pd.factorize(pd.Series(np.asarray(keys[0], dtype=object)), sort=True)
        return codes.astype(np.int64)
    frame = pd.DataFrame({i: np.asarray(k, dtype=object) for i, k in enumerate(keys)})
    return frame.groupby(list(frame.columns), sort=True).ngroup().to_numpy(np.int64)


def indicator(codes: np.ndarray) -> sp.csr_matrix:
    n = len(codes)
    return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, int(codes.max()) + 1))


def group_means(M: np.ndarray, D: sp.csr_matrix, w: np.ndarray, wsum: np.ndarray) -> np.ndarray:
    return np.asarray(D.T @ (M * w[:, None])) / wsum[:, None]


def demean(M, fe: Sequence[np.ndarray], weights=None, tol=DEMEAN_TOL, max_sweeps=DEMEAN_MAX_SWEEPS):
    """Project ``M`` (N x k) off the span of the fixed-effect indicators.

    Returns:
        (demeaned copy, number of sweeps).

    Raises:
        ConvergenceError: residual group means still above ``tol`` after
            ``max_sweeps`` sweeps.
    """
    M = np.array(M, dtype=np.float64, copy=True)
    squeeze = M.ndim == 1
    if squeeze:
        M = M[:, None]
    if not fe:
        return (M[:, 0] if squeeze else M), 0
    n = M.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    Ds = [indicator(c) for c in fe]
    wsums = [np.asarray(D.T @ w).ravel() for D in Ds]
    scale = np.maximum(1.0, np.abs(M).max(axis=0)) if n else np.ones(M.shape[1])
    sweeps = 0
    while True:
        for D, ws in zip(Ds, wsums):
            M -= D @ group_means(M, D, w, ws)
        sweeps += 1
        if len(Ds) == 1:
            break
        worst = max(float(np.max(np.abs(group_means(M, D, w, ws)) / scale)) for D, ws in zip(Ds, wsums))
        if worst < tol:
            break
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"demeaning did not converge after {sweeps} sweeps (max group mean {worst:.3e})")
    return (M[:, 0] if squeeze else M), sweeps


def independent_columns(X: np.ndarray, reference_norms: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Greedy left-to-right selection of linearly independent columns.

    A column is dependent when its residual after projection on the kept
    columns is below ``tol`` times its reference (pre-absorption) norm.
    """
    kept: list[int] = []
    basis: list[np.ndarray] = []
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        ref = max(float(reference_norms[j]), np.finfo(float).tiny)
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        nv = float(np.linalg.norm(v))
        if nv > tol * ref:
            kept.append(j)
            basis.append(v / nv)
    return kept


def cluster_meat(scores: np.ndarray, codes: np.ndarray) -> np.ndarray:
    D = indicator(codes)
    S = np.asarray(D.T @ scores)
    return S.T @ S


def ssc_factor(n_clusters: int, nobs: int, k: int) -> float:
    if n_clusters < 2 or nobs <= k:
        return float("nan")
    return n_clusters / (n_clusters - 1) * (nobs - 1) / (nobs - k)


def crve(scores: np.ndarray, bread: np.ndarray, clusters: Sequence[np.ndarray], k: int, small_sample: bool = True):
    """One- or two-way cluster-robust covariance.

    Args:
        scores: N x p score contributions (x_i * w_i * e_i).
        bread: p x p inverse Hessian.
        clusters: one or two arrays of integer cluster codes.
        k: parameter count used in the (N-1)/(N-K) factor.

    Returns:
        (covariance, info dict with cluster counts and repair flag).
    """
    n = scores.shape[0]
    info: dict = {"n_clusters": [], "eigen_repaired": False}

    def one(codes):
        g = int(codes.max()) + 1 if len(codes) else 0
        info["n_clusters"].append(g)
        f = ssc_factor(g, n, k) if small_sample else 1.0
        return f * (bread @ cluster_meat(scores, codes) @ bread)

    if len(clusters) == 1:
        V = one(np.asarray(clusters[0]))
    elif len(clusters) == 2:
        c1, c2 = (np.asarray(c) for c in clusters)
        V = one(c1) + one(c2) - one(factorize(c1, c2))
        info["n_clusters"] = info["n_clusters"][:2] + [info["n_clusters"][2]]
    else:
        raise ValueError("only one- and two-way clustering are supported")
    V = (V + V.T) / 2
    if V.size:
        vals, vecs = np.linalg.eigh(V)
        if vals.min() < 0:
            info["eigen_repaired"] = True
            V = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return V, info


@dataclass
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    kept: list[str]
    dropped: list[str]
    nobs: int
    r2: float
    r2_within: float
    intercept: float
    resid: np.ndarray
    df_resid: int
    fe: list[str] = field(default_factory=list)
    clusters: list[str] = field(default_factory=list)
    n_clusters: list[int] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)
    sweeps: int = 0

    def index(self, name: str) -> int:
        return self.names.index(name)

    def params(self) -> pd.Series:
        return pd.Series(self.coef, index=self.names)

    def bse(self) -> pd.Series:
        se = pd.Series(np.nan, index=self.names)
        if self.kept:
            se[self.kept] = np.sqrt(np.diag(self.cov))
        return se

    def cov_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.cov, index=self.kept, columns=self.kept)

    def table(self) -> pd.DataFrame:
        se = self.bse()
        t = self.params() / se
        p = 2 * stats.t.sf(np.abs(t), max(self.df_resid, 1))
        return pd.DataFrame({
            "name": self.names,
            "estimate": self.coef,
            "se": se.to_numpy(),
            "t": t.to_numpy(),
            "p": p,
            "dropped": [n in self.dropped for n in self.names],
        })


def fit(
    y,
    X,
    names: Sequence[str],
    fe: Sequence[np.ndarray] = (),
    fe_names: Sequence[str] = (),
    weights=None,
    clusters: Sequence[np.ndarray] | None = None,
    cluster_names: Sequence[str] = (),
    absorbed_dof: int | None = None,
    protect: Sequence[str] = (),
    collinear: str = "drop",
    small_sample: bool = True,
    tol: float = DEMEAN_TOL,
    max_sweeps: int = DEMEAN_MAX_SWEEPS,
) -> RegressionResult:
    """Weighted least squares of ``y`` on ``X`` after absorbing ``fe``.

    Without fixed effects an explicit ``_cons`` column is appended. Columns
    found collinear (with each other or with the fixed effects) are dropped
    and reported with coefficient 0, unless they are in ``protect`` or
    ``collinear='raise'``, in which case RankDeficiencyError names them.
    ``clusters=None`` gives the heteroskedasticity-robust (singleton
    cluster) covariance. ``absorbed_dof`` is added to the slope count in
    the (N-1)/(N-K) factor; it defaults to 1 (the absorbed constant).
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    names = list(names)
    notices: list[str] = []
    n = len(y)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    fe = [np.asarray(c) for c in fe]
    fe_names = list(fe_names) or [f"fe{i}" for i in range(len(fe))]
    keep_fe = []
    for c, name in zip(fe, fe_names):
        if len(fe) > 1 and len(np.unique(c)) == 1:
            notices.append(f"fixed effect {name!r} has a single level and was dropped")
        else:
            keep_fe.append((factorize(c), name))
    fe = [c for c, _ in keep_fe]
    fe_names = [nm for _, nm in keep_fe]
    if not fe:
        X = np.column_stack([X, np.ones(n)]) if X.size else np.ones((n, 1))
        names = names + ["_cons"]

    sw = np.sqrt(w)
    ref_norms = np.linalg.norm(X * sw[:, None], axis=0)
    both, sweeps = demean(np.column_stack([y, X]), fe, w, tol, max_sweeps)
    yd, Xd = both[:, 0], both[:, 1:]
    kept_idx = independent_columns(Xd * sw[:, None], ref_norms)
    dropped = [names[j] for j in range(len(names)) if j not in kept_idx]
    bad = [d for d in dropped if d in protect]
    if bad or (dropped and collinear == "raise"):
        raise RankDeficiencyError(bad or dropped)
    for d in dropped:
        notices.append(f"column {d!r} is collinear and was dropped")
    Xk = Xd[:, kept_idx]
    k = len(kept_idx)
    coef = np.zeros(len(names))
    if k:
        A = Xk.T @ (Xk * w[:, None])
        b = Xk.T @ (w * yd)
        cf = sla.cho_factor(A)
        beta = sla.cho_solve(cf, b)
        r = b - A @ beta
        if np.linalg.norm(r) > 1e-10 * max(np.linalg.norm(b), 1.0):
            beta += sla.cho_solve(cf, r)
        bread = sla.cho_solve(cf, np.eye(k))
        coef[kept_idx] = beta
        resid = yd - Xk @ beta
    else:
        beta = np.zeros(0)
        bread = np.zeros((0, 0))
        resid = yd.copy()
    extra = 1 if absorbed_dof is None else absorbed_dof
    k_total = k + (extra if fe else 0)
    scores = Xk * (w * resid)[:, None]
    if clusters is None:
        cl = [np.arange(n)]
        cluster_names = []
    else:
        cl = [factorize(c) for c in clusters]
    cov, info = crve(scores, bread, cl, k_total, small_sample)
    if info["eigen_repaired"]:
        notices.append("two-way covariance had negative eigenvalues; truncated at 0")
    ybar = float(np.sum(w * y) / np.sum(w))
    tss = float(np.sum(w * (y - ybar) ** 2))
    rss = float(np.sum(w * resid ** 2))
    wss = float(np.sum(w * yd ** 2))
    r2 = 1 - rss / tss if tss > 0 else float("nan")
    r2w = 1 - rss / wss if wss > 0 else float("nan")
    if fe:
        xbar = (w @ X) / np.sum(w)
        intercept = ybar - float(xbar @ coef)
    else:
        intercept = float(coef[-1])
    g = [c for c in info["n_clusters"][:2]]
    df_resid = (min(g) - 1) if clusters is not None else (n - k_total)
    return RegressionResult(
        names=names, coef=coef, cov=cov, kept=[names[j] for j in kept_idx], dropped=dropped,
        nobs=n, r2=r2, r2_within=r2w, intercept=intercept, resid=resid, df_resid=int(df_resid),
        fe=fe_names, clusters=list(cluster_names), n_clusters=info["n_clusters"],
        notices=notices, sweeps=sweeps,
    )
