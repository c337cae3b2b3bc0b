"""Per-teacher assessment-gap estimation.

Blind and teacher-assigned scores are each regressed on teacher x gender cell
effects plus common covariates W (quadratics of lagged scores):

    blind   = a1_j + a2_j * male + W'a3 + eta
    teacher = b1_j + b2_j * male + W'b3 + eps

Cell effects are absorbed by within-cell demeaning and recovered by
back-substitution. The gap of teacher j is theta_j = b2_j - a2_j.

Every reported parameter is linear in the scores, so its cluster-robust
variance is computed from exact per-row influence weights: a sparse cell part
(1/n_c on the cell's rows) plus a dense common part through the absorbed
covariate block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import RankDeficiencyError
from .panel import LAG_COLUMNS
from .regression import factorize, independent_columns, ssc_factor

EQUATIONS = ("blind", "teacher")
# per-teacher parameter order inside covariance blocks
CELL_PARAMS = ("blind_f", "blind_m", "teacher_f", "teacher_m")
# rows map cell effects to (alpha1, alpha2, beta1, beta2)
TO_STRUCTURAL = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [-1.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0, 1.0],
])
THETA_ROW = np.array([0.0, -1.0, 0.0, 1.0])  # theta = beta2 - alpha2 over structural params


@dataclass
class CovariateSpec:
    """Which columns enter W.

    ``teacher_extra`` set to a tuple gives the teacher equation its own
    extra columns (the two equations otherwise share W).
    """

    lags: tuple = LAG_COLUMNS
    quadratic: bool = True
    extra: tuple = ()
    teacher_extra: tuple | None = None


def build_covariates(obs: pd.DataFrame, columns: Sequence[str], lags: Sequence[str], quadratic: bool):
    cols: dict[str, np.ndarray] = {}
    for lag in lags:
        if lag not in obs or obs[lag].isna().all():
            continue
        x = obs[lag].astype("float64")
        miss = x.isna()
        z = x.fillna(0.0).to_numpy()
        cols[lag] = z
        if quadratic:
            cols[f"{lag}_sq"] = z * z
        if miss.any():
            cols[f"{lag}_missing"] = miss.to_numpy(dtype=np.float64)
    for c in columns:
        cols[c] = obs[c].astype("float64").fillna(0.0).to_numpy()
    names = list(cols)
    W = np.column_stack([cols[n] for n in names]) if names else np.zeros((len(obs), 0))
    return W, names


@dataclass
class SystemFit:
    """Both equations' estimates for one subject."""

    subject: str
    method: str
    cells: pd.DataFrame            # teacher_id, male, n, cell, blind, teacher (cell effects)
    covariate_names: dict          # equation -> list of W names
    coef: dict                     # equation -> common coefficient vector
    coef_cov: np.ndarray           # joint covariance of stacked common coefficients
    resid: dict                    # equation -> residual vector (row order of ``rows``)
    rows: pd.DataFrame             # sorted input rows used in estimation
    clusters: np.ndarray           # cluster code per row
    teacher_cov: dict              # teacher_id -> 4x4 covariance over CELL_PARAMS
    residual_cov: np.ndarray       # 2x2 cross-equation residual covariance
    years: dict                    # teacher_id -> sorted school years
    single_gender: list = field(default_factory=list)
    dropped_columns: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    n_clusters: int = 0

    @property
    def residual_corr(self) -> float:
        s = self.residual_cov
        return float(s[0, 1] / np.sqrt(s[0, 0] * s[1, 1]))

    def structural(self) -> pd.DataFrame:
        """alpha1, alpha2, beta1, beta2 for teachers with both gender cells."""
        rows = []
        for tid, grp in self.cells.groupby("teacher_id", sort=True):
            if len(grp) != 2:
                continue
            f = grp[~grp["male"]].iloc[0]
            m = grp[grp["male"]].iloc[0]
            rows.append({
                "teacher_id": tid,
                "alpha1": f["blind"], "alpha2": m["blind"] - f["blind"],
                "beta1": f["teacher"], "beta2": m["teacher"] - f["teacher"],
                "n_female": int(f["n"]), "n_male": int(m["n"]),
            })
        return pd.DataFrame(rows, columns=["teacher_id", "alpha1", "alpha2", "beta1", "beta2", "n_female", "n_male"])


def _prepare(obs: pd.DataFrame, spec: CovariateSpec, cluster: str):
    if "female" not in obs:
        raise ValueError("observations need a 'female' column; merge student records first")
    subjects = obs["subject"].unique()
    if len(subjects) != 1:
        raise ValueError(f"estimate one subject at a time, got {sorted(subjects)}")
    rows = obs.sort_values(["teacher_id", "school_year", "student_id"], kind="mergesort").reset_index(drop=True)
    rows["male"] = ~rows["female"].astype(bool)
    designs = {}
    teacher_extra = spec.extra if spec.teacher_extra is None else spec.teacher_extra
    designs["blind"] = build_covariates(rows, spec.extra, spec.lags, spec.quadratic)
    designs["teacher"] = build_covariates(rows, teacher_extra, spec.lags, spec.quadratic)
    return str(subjects[0]), rows, designs


def _cell_stats(codes, n_cells, M):
    counts = np.bincount(codes, minlength=n_cells).astype(np.float64)
    D = sp.csr_matrix((np.ones(len(codes)), (np.arange(len(codes)), codes)), shape=(len(codes), n_cells))
    means = np.asarray(D.T @ M) / counts[:, None]
    return counts, means


def estimate_system(obs: pd.DataFrame, spec: CovariateSpec | None = None, cluster: str = "student_id",
                    method: str = "separate", small_sample: bool = True) -> SystemFit:
    """Estimate both equations with teacher x gender cells absorbed.

    ``method='separate'`` solves each equation by least squares;
    ``method='sure'`` solves the common coefficients by feasible GLS with the
    estimated cross-equation residual covariance. With identical designs the
    two coincide.

    Raises:
        RankDeficiencyError: covariates collinear with each other or with the
            cells; identically zero columns are dropped instead.
    """
    spec = spec or CovariateSpec()
    subject, rows, designs = _prepare(obs, spec, cluster)
    n = len(rows)
    codes = factorize(rows["teacher_id"], rows["male"])
    n_cells = int(codes.max()) + 1
    cell_keys = rows.groupby(["teacher_id", "male"], sort=True).size().reset_index(name="n")
    cell_keys["cell"] = np.arange(n_cells)

    dropped, W, Wt, Wbar, names = [], {}, {}, {}, {}
    counts = None
    Y = rows[["blind_score", "teacher_score"]].to_numpy(np.float64)
    counts, Ybar = _cell_stats(codes, n_cells, Y)
    Yt = Y - Ybar[codes]
    for eq in EQUATIONS:
        M, nm = designs[eq]
        nz = [j for j in range(M.shape[1]) if np.any(M[:, j] != 0)]
        dropped += [f"{eq}:{nm[j]}" for j in range(M.shape[1]) if j not in nz]
        M, nm = M[:, nz], [nm[j] for j in nz]
        _, mb = _cell_stats(codes, n_cells, M) if M.shape[1] else (None, np.zeros((n_cells, 0)))
        Mt = M - mb[codes] if M.shape[1] else M
        keep = independent_columns(Mt, np.linalg.norm(M, axis=0))
        if len(keep) < M.shape[1]:
            bad = [nm[j] for j in range(M.shape[1]) if j not in keep]
            raise RankDeficiencyError(bad, f"{eq} equation: collinear covariates {bad}")
        W[eq], Wt[eq], Wbar[eq], names[eq] = M, Mt, mb, nm

    p = {eq: Wt[eq].shape[1] for eq in EQUATIONS}
    P = p["blind"] + p["teacher"]
    # separate least squares
    coef, A_inv = {}, {}
    for k, eq in enumerate(EQUATIONS):
        if p[eq]:
            A = Wt[eq].T @ Wt[eq]
            cf = sla.cho_factor(A)
            rhs = Wt[eq].T @ Yt[:, k]
            b = sla.cho_solve(cf, rhs)
            r = rhs - A @ b
            if np.linalg.norm(r) > 1e-10 * max(np.linalg.norm(rhs), 1.0):
                b = b + sla.cho_solve(cf, r)
            coef[eq] = b
            A_inv[eq] = sla.cho_solve(cf, np.eye(p[eq]))
        else:
            coef[eq] = np.zeros(0)
            A_inv[eq] = np.zeros((0, 0))
    resid = {eq: Yt[:, k] - Wt[eq] @ coef[eq] for k, eq in enumerate(EQUATIONS)}
    k_dof = n_cells + max(p.values())
    E = np.column_stack([resid["blind"], resid["teacher"]])
    sigma = E.T @ E / max(n - k_dof, 1)

    Sinv = np.eye(2)
    Mjoint = sla.block_diag(A_inv["blind"], A_inv["teacher"]) if P else np.zeros((0, 0))
    sure_note = None
    same_design = names["blind"] == names["teacher"] and np.array_equal(W["blind"], W["teacher"])
    if method == "sure" and not same_design:
        if np.linalg.cond(sigma) > 1e12:
            sure_note = "cross-equation residual covariance is singular; SURE reduces to equation-by-equation least squares"
        else:
            Sinv = np.linalg.inv(sigma)
    # with identical designs GLS equals equation-by-equation least squares for any
    # residual covariance (sandwich included), so the identity weight is exact
    if method == "sure" and not same_design and sure_note is None:
        if P:
            blocks = [[Sinv[a, b] * (Wt[ea].T @ Wt[eb]) for b, eb in enumerate(EQUATIONS)] for a, ea in enumerate(EQUATIONS)]
            H = np.block(blocks)
            rhs = np.concatenate([
                sum(Sinv[a, b] * (Wt[ea].T @ Yt[:, b]) for b in range(2)) for a, ea in enumerate(EQUATIONS)
            ])
            cf = sla.cho_factor(H)
            sol = sla.cho_solve(cf, rhs)
            coef = {"blind": sol[:p["blind"]], "teacher": sol[p["blind"]:]}
            Mjoint = sla.cho_solve(cf, np.eye(P))
            resid = {eq: Yt[:, k] - Wt[eq] @ coef[eq] for k, eq in enumerate(EQUATIONS)}
            E = np.column_stack([resid["blind"], resid["teacher"]])
            sigma = E.T @ E / max(n - k_dof, 1)
    if method not in ("separate", "sure"):
        raise ValueError(f"unknown method {method!r}")

    cell_eff = {eq: Ybar[:, k] - Wbar[eq] @ coef[eq] for k, eq in enumerate(EQUATIONS)}
    cells = cell_keys.copy()
    for eq in EQUATIONS:
        cells[eq] = cell_eff[eq]

    clusters = factorize(rows[cluster])
    G = int(clusters.max()) + 1
    # per-row score for the common block
    weighted_e = E @ Sinv.T  # column a = sum_b Sinv[a,b] e_b
    Q_rows = np.column_stack([Wt["blind"] * weighted_e[:, [0]], Wt["teacher"] * weighted_e[:, [1]]]) if P else np.zeros((n, 0))
    Dg = sp.csr_matrix((np.ones(n), (np.arange(n), clusters)), shape=(n, G))
    U = np.asarray(Dg.T @ Q_rows) if P else np.zeros((G, 0))
    f = ssc_factor(G, n, k_dof) if small_sample else 1.0
    coef_cov = f * (Mjoint @ (U.T @ U) @ Mjoint.T) if P else np.zeros((0, 0))

    teacher_cov, single = _teacher_covariances(rows, cells, codes, clusters, G, E, Wbar, Mjoint, p, U, f)
    warnings = [sure_note] if sure_note else []
    per_teacher_clusters = rows.groupby("teacher_id")[cluster].nunique()
    few = sorted(t for t, g in per_teacher_clusters.items() if g < len(CELL_PARAMS) and t in teacher_cov)
    if few:
        warnings.append(f"fewer clusters than contrast parameters for teachers {few[:10]}")
    if single:
        warnings.append(f"{len(single)} teachers with a single-gender classroom excluded from gap estimation")
    years = {t: sorted(int(y) for y in g.unique()) for t, g in rows.groupby("teacher_id", sort=True)["school_year"]}
    return SystemFit(
        subject=subject, method=method, cells=cells, covariate_names=names, coef=coef,
        coef_cov=coef_cov, resid=resid, rows=rows, clusters=clusters, teacher_cov=teacher_cov,
        residual_cov=sigma, years=years, single_gender=single, dropped_columns=dropped,
        warnings=warnings, n_clusters=G,
    )


def _teacher_covariances(rows, cells, codes, clusters, G, E, Wbar, Mjoint, p, U, factor):
    """Cluster-robust 4x4 covariance of each two-cell teacher's cell effects."""
    per_teacher = cells.groupby("teacher_id", sort=True)["cell"].apply(list)
    both = [t for t, c in per_teacher.items() if len(c) == 2]
    single = [t for t, c in per_teacher.items() if len(c) != 2]
    if not both:
        return {}, single
    tindex = {t: i for i, t in enumerate(both)}
    T = len(both)
    cell_male = cells["male"].to_numpy()
    cell_n = cells["n"].to_numpy(np.float64)
    cell_teacher = cells["teacher_id"].map(tindex).to_numpy(dtype=float)
    row_t = cell_teacher[codes]
    ok = ~np.isnan(row_t)
    row_t = row_t[ok].astype(np.int64)
    row_codes = codes[ok]
    slot_m = cell_male[row_codes].astype(np.int64)
    inv_n = 1.0 / cell_n[row_codes]
    # sparse cell part: rows 4*t + slot, columns = clusters
    r_idx = np.concatenate([4 * row_t + slot_m, 4 * row_t + 2 + slot_m])
    c_idx = np.concatenate([clusters[ok], clusters[ok]])
    vals = np.concatenate([E[ok, 0] * inv_n, E[ok, 1] * inv_n])
    V = sp.csr_matrix((vals, (r_idx, c_idx)), shape=(4 * T, G))
    VV = (V @ V.T).tocoo()
    same = (VV.row // 4) == (VV.col // 4)
    out = np.zeros((T, 4, 4))
    np.add.at(out, (VV.row[same] // 4, VV.row[same] % 4, VV.col[same] % 4), VV.data[same])
    P = U.shape[1]
    if P:
        # L maps the stacked common coefficients into each cell effect (with sign -)
        cell_order = np.zeros((T, 4), dtype=np.int64)
        for t in both:
            cs = cells[cells["teacher_id"] == t]
            i = tindex[t]
            cell_order[i, 0] = cs.loc[~cs["male"], "cell"].iloc[0]
            cell_order[i, 1] = cs.loc[cs["male"], "cell"].iloc[0]
        pb = p["blind"]
        L = np.zeros((T, 4, P))
        L[:, 0, :pb] = Wbar["blind"][cell_order[:, 0]]
        L[:, 1, :pb] = Wbar["blind"][cell_order[:, 1]]
        L[:, 2, pb:] = Wbar["teacher"][cell_order[:, 0]]
        L[:, 3, pb:] = Wbar["teacher"][cell_order[:, 1]]
        L = L @ Mjoint.T
        K = np.asarray(V @ U).reshape(T, 4, P)
        Qm = U.T @ U
        LK = np.einsum("tap,tbp->tab", L, K)
        out += -LK - LK.transpose(0, 2, 1) + np.einsum("tap,pq,tbq->tab", L, Qm, L)
    out *= factor
    return {t: out[tindex[t]] for t in both}, single


def cluster_robust_cov(fit: SystemFit, teacher_id) -> np.ndarray:
    """Covariance of (alpha1, alpha2, beta1, beta2) for one teacher."""
    C = fit.teacher_cov[teacher_id]
    return TO_STRUCTURAL @ C @ TO_STRUCTURAL.T


def sure_fit(obs: pd.DataFrame, spec: CovariateSpec | None = None, cluster: str = "student_id",
             small_sample: bool = True) -> SystemFit:
    """Joint estimation with correlated cross-equation errors."""
    return estimate_system(obs, spec, cluster=cluster, method="sure", small_sample=small_sample)


GAP_COLUMNS = ["teacher_id", "subject", "theta_hat", "se", "n_female", "n_male", "years"]


def teacher_gaps(fit: SystemFit, min_cell: int = 2, covariance: str | None = None) -> pd.DataFrame:
    """theta_hat_j = beta2_j - alpha2_j with its standard error.

    Args:
        covariance: ``'independent'`` combines the two contrasts' variances
            assuming no cross-equation covariance; ``'joint'`` uses the
            estimated cross covariance. Defaults to independent for the
            separate path and joint for SURE fits.

    Teachers with fewer than ``min_cell`` students of either gender are
    omitted; the count is in ``attrs['omitted']``.
    """
    covariance = covariance or ("joint" if fit.method == "sure" else "independent")
    st = fit.structural()
    keep = (st["n_female"] >= min_cell) & (st["n_male"] >= min_cell)
    omitted = int((~keep).sum())
    st = st[keep]
    thetas, ses = [], []
    for tid, a2, b2 in zip(st["teacher_id"], st["alpha2"], st["beta2"]):
        C = cluster_robust_cov(fit, tid)
        if covariance == "joint":
            var = THETA_ROW @ C @ THETA_ROW
        else:
            var = C[1, 1] + C[3, 3]
        thetas.append(b2 - a2)
        ses.append(float(np.sqrt(max(var, 0.0))))
    out = pd.DataFrame({
        "teacher_id": st["teacher_id"].to_numpy(),
        "subject": fit.subject,
        "theta_hat": np.asarray(thetas, dtype=np.float64),
        "se": np.asarray(ses, dtype=np.float64),
        "n_female": st["n_female"].to_numpy(np.int64),
        "n_male": st["n_male"].to_numpy(np.int64),
        "years": [";".join(str(y) for y in fit.years[t]) for t in st["teacher_id"]],
    }, columns=GAP_COLUMNS)
    out.attrs["omitted"] = omitted
    out.attrs["single_gender"] = len(fit.single_gender)
    return out


def estimate_gaps(obs: pd.DataFrame, spec: CovariateSpec | None = None, min_cell: int = 2,
                  method: str = "separate") -> pd.DataFrame:
    """Gap table for every subject present in ``obs``."""
    frames = []
    for subject in sorted(obs["subject"].unique()):
        fit = estimate_system(obs[obs["subject"] == subject], spec, method=method)
        frames.append(teacher_gaps(fit, min_cell))
    if not frames:
        return pd.DataFrame(columns=GAP_COLUMNS)
    return pd.concat(frames, ignore_index=True)


@dataclass
class VaCorrelationReport:
    subject: str
    labels: tuple
    corr: np.ndarray
    sd: np.ndarray
    raw_cov: np.ndarray
    noise_cov: np.ndarray
    floored: list
    n_teachers: int

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.corr, index=self.labels, columns=self.labels)


VA_LABELS = ("assessment_gap", "va_female", "va_male")
# (theta, VA_f, VA_m) from (alpha1, alpha2, beta1, beta2)
TO_VA = np.array([
    [0.0, -1.0, 0.0, 1.0],
    [1.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0],
])


def va_correlation_report(fit: SystemFit, weights: str | None = None, min_cell: int = 2,
                          floor: float = 1e-12) -> VaCorrelationReport:
    """Sampling-error corrected correlations of (gap, VA to girls, VA to boys).

    The weighted covariance of the per-teacher estimates minus the weighted
    mean of their sampling covariances. ``weights='students'`` weights by
    class size, otherwise teachers count equally. Variances at or below 0
    after correction are floored and listed in ``floored``.
    """
    st = fit.structural()
    st = st[(st["n_female"] >= min_cell) & (st["n_male"] >= min_cell)]
    R = TO_VA @ TO_STRUCTURAL
    vals = st[["alpha1", "alpha2", "beta1", "beta2"]].to_numpy() @ TO_VA.T
    noise = np.stack([R @ fit.teacher_cov[t] @ R.T for t in st["teacher_id"]])
    if weights == "students":
        w = (st["n_female"] + st["n_male"]).to_numpy(np.float64)
    else:
        w = np.ones(len(st))
    w = w / w.sum()
    mean = w @ vals
    dev = vals - mean
    raw = (dev * w[:, None]).T @ dev
    noise_mean = np.einsum("t,tab->ab", w, noise)
    cov = raw - noise_mean
    floored = []
    d = np.diag(cov).copy()
    for i, lab in enumerate(VA_LABELS):
        if d[i] <= floor:
            floored.append(lab)
            d[i] = floor
    sd = np.sqrt(d)
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    return VaCorrelationReport(fit.subject, VA_LABELS, corr, sd, raw, noise_mean, floored, len(st))
