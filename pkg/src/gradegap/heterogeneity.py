"""Distribution of estimated gaps and teacher-level predictor regressions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import RankDeficiencyError
from .regression import RegressionResult, fit


@dataclass
class VarianceDecomposition:
    subject: str
    unadjusted_mean: float
    var_unweighted: float
    var_weighted: float
    n_teachers: int
    n_students: int
    weight_min: float
    weight_max: float
    floored: list = field(default_factory=list)

    @property
    def sd_unweighted(self) -> float:
        return float(np.sqrt(self.var_unweighted))

    @property
    def sd_weighted(self) -> float:
        return float(np.sqrt(self.var_weighted))

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "unadjusted_mean": self.unadjusted_mean,
            "sd_unweighted": self.sd_unweighted,
            "sd_weighted": self.sd_weighted,
            "var_unweighted": self.var_unweighted,
            "var_weighted": self.var_weighted,
            "n_teachers": self.n_teachers,
            "n_students": self.n_students,
            "weight_min": self.weight_min,
            "weight_max": self.weight_max,
            "floored": list(self.floored),
        }


def variance_decomposition(gaps: pd.DataFrame, weights: Sequence[float] | None = None) -> VarianceDecomposition:
    """Bias-corrected dispersion of the true gaps.

    ``var_unweighted`` is the mean of (theta_hat - mu)^2 - s^2 and
    ``var_weighted`` is sum w (theta_hat - mu)^2 - sum w s^2 with w_j the
    teacher's share of students (or ``weights`` normalized to sum to 1).
    mu is the unweighted mean in both. Negative values are floored at 0 and
    listed in ``floored``.

    Raises:
        ValueError: fewer than two teachers.
    """
    theta = gaps["theta_hat"].to_numpy(np.float64)
    s = gaps["se"].to_numpy(np.float64)
    J = len(theta)
    if J < 2:
        raise ValueError(f"variance decomposition needs at least 2 teachers, got {J}")
    if weights is None:
        n_j = (gaps["n_female"] + gaps["n_male"]).to_numpy(np.float64)
    else:
        n_j = np.asarray(weights, dtype=np.float64)
    w = n_j / n_j.sum()
    mu = float(np.mean(theta))
    dev2 = (theta - mu) ** 2
    var_u = float(np.mean(dev2 - s ** 2))
    var_w = float(np.sum(w * dev2) - np.sum(w * s ** 2))
    floored = []
    if var_u < 0:
        floored.append("unweighted")
        var_u = 0.0
    if var_w < 0:
        floored.append("weighted")
        var_w = 0.0
    subjects = gaps["subject"].unique() if "subject" in gaps else []
    subject = str(subjects[0]) if len(subjects) == 1 else "pooled"
    return VarianceDecomposition(
        subject=subject, unadjusted_mean=mu, var_unweighted=var_u, var_weighted=var_w,
        n_teachers=J, n_students=int((gaps["n_female"] + gaps["n_male"]).sum()) if "n_female" in gaps else 0,
        weight_min=float(w.min()), weight_max=float(w.max()), floored=floored,
    )


@dataclass
class PredictorRegressionResult:
    regression: RegressionResult
    fixed_effects: list
    weighting: str
    n_unmatched: int = 0

    @property
    def r2(self) -> float:
        return self.regression.r2

    @property
    def n(self) -> int:
        return self.regression.nobs

    def table(self) -> pd.DataFrame:
        return self.regression.table()

    def coef(self, name: str) -> float:
        return float(self.regression.coef[self.regression.index(name)])

    def se(self, name: str) -> float:
        return float(self.regression.bse()[name])


def design_matrix(frame: pd.DataFrame, columns: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Numeric design from mixed-type columns.

    Booleans become 0/1, categoricals get one dummy per level beyond the
    first (sorted), and missing values are imputed 0 with an added
    ``<col>_missing`` dummy.
    """
    parts, names = [], []
    for col in columns:
        x = frame[col]
        miss = x.isna().to_numpy()
        if x.dtype == object or isinstance(x.dtype, pd.CategoricalDtype):
            levels = sorted(str(v) for v in x.dropna().unique())
            xs = x.astype(object).where(~miss, None)
            for lev in levels[1:]:
                parts.append((xs.astype(str) == lev).to_numpy(np.float64) * ~miss)
                names.append(f"{col}[{lev}]")
        else:
            parts.append(pd.to_numeric(x.astype("float64"), errors="coerce").fillna(0.0).to_numpy())
            names.append(col)
        if miss.any():
            parts.append(miss.astype(np.float64))
            names.append(f"{col}_missing")
    X = np.column_stack(parts) if parts else np.zeros((len(frame), 0))
    return X, names


def _scale_outcome(gaps: pd.DataFrame, sd: float | VarianceDecomposition | None) -> np.ndarray:
    if isinstance(sd, VarianceDecomposition):
        sd = sd.sd_weighted
    if sd is None:
        sd = variance_decomposition(gaps).sd_weighted
    if not sd > 0:
        raise ValueError("bias-corrected SD is 0; the gap outcome cannot be scaled")
    return gaps["theta_hat"].to_numpy(np.float64) / sd


def characteristics_regression(
    gaps: pd.DataFrame,
    teachers: pd.DataFrame,
    covariates: Sequence[str],
    sd: float | VarianceDecomposition | None = None,
    weighting: str = "inverse_variance",
    fe: str | None = "school_id",
    cluster: str = "school_id",
) -> PredictorRegressionResult:
    """Regress scaled gaps on teacher characteristics.

    The outcome is theta_hat over the subject's bias-corrected SD. Weights
    are 1/s^2 (``weighting='inverse_variance'``), 1/s (``'inverse_se'``) or
    none (``'none'``). School effects are absorbed and SEs clustered by
    school. Gaps without a matching teacher record are excluded and counted.
    """
    keys = ["teacher_id", "subject"] if "subject" in teachers and "subject" in gaps else ["teacher_id"]
    merged = gaps.merge(teachers, on=keys, how="inner", suffixes=("", "_teacher"))
    merged = merged.sort_values(keys, kind="mergesort").reset_index(drop=True)
    n_unmatched = len(gaps) - len(merged)
    y = _scale_outcome(merged, sd if sd is not None else variance_decomposition(gaps))
    X, names = design_matrix(merged, covariates)
    s = merged["se"].to_numpy(np.float64)
    if weighting == "inverse_variance":
        w = 1.0 / s ** 2
    elif weighting == "inverse_se":
        w = 1.0 / s
    elif weighting == "none":
        w = None
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    fes = [merged[fe].to_numpy()] if fe else []
    res = fit(y, X, names, fe=fes, fe_names=[fe] if fe else [], weights=w,
              clusters=[merged[cluster].to_numpy()], cluster_names=[cluster])
    return PredictorRegressionResult(res, [fe] if fe else [], weighting, n_unmatched)


def iat_relation_regression(
    gaps: pd.DataFrame,
    iat: pd.DataFrame,
    covariates: Sequence[str] = (),
    sd: float | VarianceDecomposition | None = None,
    location: str = "school_location",
    iat_column: str = "iat_std",
) -> PredictorRegressionResult:
    """Regress scaled gaps on the teacher's standardized IAT score.

    ``iat`` holds one row per teacher with ``teacher_id``, the IAT column,
    the location key and any covariates. Location effects are absorbed and
    SEs clustered by location.

    Raises:
        RankDeficiencyError: the IAT score has no variance (within locations).
    """
    merged = gaps.merge(iat, on="teacher_id", how="inner", suffixes=("", "_iat"))
    merged = merged.sort_values(["teacher_id"], kind="mergesort").reset_index(drop=True)
    n_unmatched = len(gaps) - len(merged)
    x = merged[iat_column].to_numpy(np.float64)
    if len(x) == 0 or np.ptp(x) == 0:
        raise RankDeficiencyError([iat_column], f"degenerate regressor {iat_column!r}: zero variance")
    y = _scale_outcome(merged, sd if sd is not None else variance_decomposition(gaps))
    Xc, names = design_matrix(merged, covariates)
    X = np.column_stack([x, Xc])
    res = fit(y, X, [iat_column] + names, fe=[merged[location].to_numpy()], fe_names=[location],
              clusters=[merged[location].to_numpy()], cluster_names=[location], protect=[iat_column])
    return PredictorRegressionResult(res, [location], "none", n_unmatched)


def cross_subject_report(gaps: pd.DataFrame) -> pd.DataFrame:
    """Paired OLS of one subject's gap on another's, for teachers in both."""
    wide = gaps.pivot_table(index="teacher_id", columns="subject", values="theta_hat", aggfunc="first")
    subjects = sorted(wide.columns)
    rows = []
    for i, a in enumerate(subjects):
        for b in subjects[i + 1:]:
            pair = wide[[a, b]].dropna()
            n = len(pair)
            if n < 3:
                rows.append({"subject_x": a, "subject_y": b, "n": n, "slope": np.nan, "se": np.nan, "corr": np.nan})
                continue
            res = fit(pair[b].to_numpy(), pair[[a]].to_numpy(), [a])
            rows.append({
                "subject_x": a, "subject_y": b, "n": n,
                "slope": float(res.coef[0]), "se": float(res.bse()[a]),
                "corr": float(np.corrcoef(pair[a], pair[b])[0, 1]),
            })
    return pd.DataFrame(rows, columns=["subject_x", "subject_y", "n", "slope", "se", "corr"])
