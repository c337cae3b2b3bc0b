"""Long-run effect regressions of exposure to teacher grading gaps.

The treatment for a student cohort is the teacher's posterior-mean gap
estimated without that cohort's own exam-year scores (leave-one-year-out),
centered and scaled by that run's bias-corrected SD. Effects come from

    Y = d0 + d1 theta* x Female + d2 Female + d3 theta* + X'd4 + FE + u

with fixed effects absorbed and one- or two-way clustered covariances.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import eb
from .gaps import CovariateSpec, estimate_system, teacher_gaps
from .heterogeneity import variance_decomposition
from .regression import RegressionResult, fit

DEFAULT_FE = ("cohort", "grade", "school_year", "school_id")
DEFAULT_CLUSTERS = ("student_id", "school_id")
EXAM_OFFSET = 3  # grade-8 exam year = projected graduation year - 3


def default_exclusions(cohorts: Iterable[int], offset: int = EXAM_OFFSET) -> dict[int, tuple[int, ...]]:
    return {int(c): (int(c) - offset,) for c in sorted(set(cohorts))}


LOO_COLUMNS = ["cohort", "subject", "teacher_id", "theta_hat", "se", "theta_star", "theta_star_loo",
               "excluded_years", "years_used"]


@dataclass
class LooResult:
    estimates: pd.DataFrame
    missing: pd.DataFrame            # (cohort, subject, teacher_id) without a LOO estimate
    flags: list = field(default_factory=list)

    def for_cohort(self, cohort: int) -> pd.DataFrame:
        return self.estimates[self.estimates["cohort"] == cohort]


def _posterior(gaps: pd.DataFrame, method: str, grid=None, p: int = 5):
    dec = variance_decomposition(gaps)
    if method == "gaussian":
        post = eb.shrink(gaps, eb.fit_gaussian_prior(dec))
    elif method == "deconvolve":
        cal = eb.calibrate_penalty(gaps, dec, grid=grid, p=p)
        post = eb.posterior_mean_deconv(gaps, cal.prior)
    else:
        raise ValueError(f"unknown EB method {method!r}")
    return post, dec


def _loo_run(obs: pd.DataFrame, excluded: tuple, spec, min_cell, method, flags):
    kept = obs[~obs["school_year"].isin(excluded)]
    frames = []
    for subject in sorted(kept["subject"].unique()):
        sub = kept[kept["subject"] == subject]
        gaps = teacher_gaps(estimate_system(sub, spec), min_cell)
        if len(gaps) < 2:
            flags.append(f"excluding {list(excluded)}: fewer than 2 estimable {subject} teachers")
            continue
        post, dec = _posterior(gaps, method)
        if not dec.sd_weighted > 0:
            flags.append(f"excluding {list(excluded)}: {subject} bias-corrected SD is 0; treatment undefined")
            continue
        ts = post["theta_star"].to_numpy()
        out = gaps[["subject", "teacher_id", "theta_hat", "se", "years"]].rename(columns={"years": "years_used"})
        out["theta_star"] = ts
        out["theta_star_loo"] = (ts - ts.mean()) / dec.sd_weighted
        frames.append(out)
    if not frames:
        return pd.DataFrame(columns=[c for c in LOO_COLUMNS if c not in ("cohort", "excluded_years")])
    return pd.concat(frames, ignore_index=True)


def leave_one_year_out(obs: pd.DataFrame, cohorts: Iterable[int] | None = None,
                       exclusions: Mapping[int, Iterable[int]] | None = None,
                       spec: CovariateSpec | None = None, min_cell: int = 2, method: str = "gaussian",
                       exam_offset: int = EXAM_OFFSET) -> LooResult:
    """Per-cohort treatment values excluding each cohort's exam-year scores.

    Args:
        obs: standardized score rows with a ``female`` column.
        cohorts: projected graduation years to produce treatments for.
        exclusions: cohort -> school years to drop. Defaults to the cohort's
            grade-8 exam year (cohort - ``exam_offset``). Cohorts mapped to
            an empty set get the full-sample estimate.
        method: ``'gaussian'`` or ``'deconvolve'`` posterior means.

    Teachers present in ``obs`` but without an estimate for a cohort are
    listed in ``missing`` and flagged.
    """
    if exclusions is None:
        if cohorts is None:
            raise ValueError("pass cohorts or an explicit exclusion map")
        exclusions = default_exclusions(cohorts, exam_offset)
    exclusions = {int(c): tuple(sorted({int(y) for y in ys})) for c, ys in exclusions.items()}
    flags: list[str] = []
    cache: dict[tuple, pd.DataFrame] = {}
    est, missing = [], []
    universe = obs[["subject", "teacher_id"]].drop_duplicates().sort_values(["subject", "teacher_id"])
    for cohort in sorted(exclusions):
        excl = exclusions[cohort]
        if excl not in cache:
            cache[excl] = _loo_run(obs, excl, spec, min_cell, method, flags)
        res = cache[excl].copy()
        res.insert(0, "cohort", cohort)
        res["excluded_years"] = ";".join(str(y) for y in excl)
        if len(res):
            est.append(res)
        have = set(zip(res["subject"], res["teacher_id"]))
        lack = [(cohort, s, t) for s, t in universe.itertuples(index=False) if (s, t) not in have]
        if lack:
            flags.append(f"cohort {cohort}: {len(lack)} teachers lack a leave-one-year-out estimate")
        missing.extend(lack)
    estimates = pd.concat(est, ignore_index=True)[LOO_COLUMNS] if est else pd.DataFrame(columns=LOO_COLUMNS)
    if estimates.empty:
        flags.append("empty treatment set")
    return LooResult(estimates, pd.DataFrame(missing, columns=["cohort", "subject", "teacher_id"]), flags)


def check_provenance(loo: LooResult) -> bool:
    """True when no estimate uses a school year excluded for its cohort."""
    for used, excl in zip(loo.estimates["years_used"], loo.estimates["excluded_years"]):
        u = {int(y) for y in str(used).split(";") if y}
        e = {int(y) for y in str(excl).split(";") if y}
        if u & e:
            return False
    return True


def build_exposure_rows(links: pd.DataFrame, loo: LooResult, cohort_column: str = "cohort_projected_grad") -> pd.DataFrame:
    """Attach each student-grade-subject link's LOO treatment.

    ``links`` holds one row per (student, teacher, subject, year) with the
    student's projected graduation cohort; rows whose teacher lacks an
    estimate for that cohort are excluded (count in ``attrs['excluded']``).
    """
    lk = links.rename(columns={cohort_column: "cohort"}) if cohort_column in links else links
    treat = loo.estimates[["cohort", "subject", "teacher_id", "theta_star_loo", "excluded_years"]]
    rows = lk.merge(treat, on=["cohort", "subject", "teacher_id"], how="inner")
    rows = rows.sort_values(["student_id", "subject", "school_year", "teacher_id"], kind="mergesort").reset_index(drop=True)
    rows.attrs["excluded"] = len(lk) - len(rows)
    return rows


def add_interactions(rows: pd.DataFrame, columns: Sequence[str], by: str = "female") -> tuple[pd.DataFrame, list[str]]:
    out = rows.copy()
    names = []
    b = out[by].astype(np.float64)
    for c in columns:
        name = f"{c}_x_{by}"
        out[name] = out[c].astype(np.float64) * b
        names.append(name)
    return out, names


@dataclass
class EffectsResult:
    outcome: str
    treatment: str
    regression: RegressionResult
    ybar_female: float
    ybar_male: float
    n: int
    fixed_effects: list
    clusters: list
    notices: list = field(default_factory=list)

    @property
    def interaction(self) -> str:
        return f"{self.treatment}_x_female"

    def coef(self, name: str | None = None) -> float:
        name = name or self.interaction
        return float(self.regression.coef[self.regression.index(name)])

    def se(self, name: str | None = None) -> float:
        return float(self.regression.bse()[name or self.interaction])

    def ci(self, name: str | None = None, level: float = 0.95) -> tuple[float, float]:
        """t interval with (smallest cluster count - 1) degrees of freedom."""
        b, s = self.coef(name), self.se(name)
        q = stats.t.ppf(0.5 + level / 2, max(self.regression.df_resid, 1))
        return b - q * s, b + q * s

    def table(self) -> pd.DataFrame:
        return self.regression.table()


def _prepare_design(rows, treatment, covariates, interact, female):
    fem = rows[female].astype(np.float64).to_numpy()
    t = rows[treatment].astype(np.float64).to_numpy()
    cols = [t * fem, fem, t]
    names = [f"{treatment}_x_female", "female", treatment]
    for c in covariates:
        cols.append(rows[c].astype(np.float64).to_numpy())
        names.append(c)
    for c in interact:
        cols.append(rows[c].astype(np.float64).to_numpy() * fem)
        names.append(f"{c}_x_female")
    return np.column_stack(cols), names


def estimate_effects(rows: pd.DataFrame, outcome: str, treatment: str = "theta_star_loo",
                     covariates: Sequence[str] = (), interact: Sequence[str] = (),
                     fe: Sequence[str] = DEFAULT_FE, clusters: Sequence[str] = DEFAULT_CLUSTERS,
                     location_gender: str | None = None, female: str = "female",
                     small_sample: bool = True) -> EffectsResult:
    """Exposure-effect regression with absorbed fixed effects.

    ``interact`` lists covariates also entered interacted with Female.
    ``location_gender`` names a column whose levels are absorbed
    separately by gender. Rows with a missing outcome are dropped with a
    notice.

    Raises:
        RankDeficiencyError: the treatment or its interaction with Female
            cannot be estimated (e.g. a constant treatment).
        ConvergenceError: the demeaning did not converge.
    """
    notices = []
    keep = rows[outcome].notna()
    if not keep.all():
        notices.append(f"{int((~keep).sum())} rows with missing {outcome!r} dropped")
    used = [outcome, treatment, female, *covariates, *interact, *fe, *clusters]
    if location_gender:
        used.append(location_gender)
    data = rows.loc[keep, list(dict.fromkeys(used))]
    data = data.sort_values(list(dict.fromkeys(used)), kind="mergesort").reset_index(drop=True)
    X, names = _prepare_design(data, treatment, covariates, interact, female)
    y = data[outcome].astype(np.float64).to_numpy()
    fes = [data[c].to_numpy() for c in fe]
    fe_names = list(fe)
    if location_gender:
        key = data[location_gender].astype(str) + "|" + data[female].astype(int).astype(str)
        fes.append(key.to_numpy())
        fe_names.append(f"{location_gender}_x_female")
    res = fit(y, X, names, fe=fes, fe_names=fe_names,
              clusters=[data[c].to_numpy() for c in clusters] if clusters else None,
              cluster_names=list(clusters), protect=[names[0], names[2]], small_sample=small_sample)
    fem = data[female].astype(bool).to_numpy()
    return EffectsResult(
        outcome=outcome, treatment=treatment, regression=res,
        ybar_female=float(y[fem].mean()) if fem.any() else float("nan"),
        ybar_male=float(y[~fem].mean()) if (~fem).any() else float("nan"),
        n=len(y), fixed_effects=fe_names, clusters=list(clusters), notices=notices + res.notices,
    )


def percentile_threshold(reference: np.ndarray, p: float) -> float:
    """Earnings threshold for percentile p; p=0 gives 0 and p=100 gives +inf."""
    ref = np.asarray(reference, dtype=np.float64)
    ref = ref[np.isfinite(ref)]
    if ref.size == 0:
        raise ValueError("reference earnings population is empty")
    if not 0 <= p <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    if p == 0:
        return 0.0
    if p == 100:
        return float("inf")
    return float(np.quantile(ref, p / 100))


def percentile_outcomes(earnings: np.ndarray, reference: np.ndarray, percentiles: Sequence[float]) -> dict[float, np.ndarray]:
    e = np.nan_to_num(np.asarray(earnings, dtype=np.float64), nan=0.0)
    return {float(p): (e > percentile_threshold(reference, p)).astype(np.float64) for p in percentiles}


def percentile_effects(rows: pd.DataFrame, earnings: str, reference: np.ndarray,
                       percentiles: Sequence[float] = tuple(range(5, 100, 5)), **kwargs) -> dict[float, EffectsResult]:
    """One exposure regression per earnings percentile: 1{earnings > q_p}."""
    outcomes = percentile_outcomes(rows[earnings].to_numpy(), reference, percentiles)
    out = {}
    for p, y in outcomes.items():
        name = f"above_p{p:g}"
        out[p] = estimate_effects(rows.assign(**{name: y}), name, **kwargs)
    return out


def internalization(rows: pd.DataFrame, treatment: str = "teacher_iat", outcome: str = "student_iat",
                    covariates: Sequence[str] = (), fe: Sequence[str] = ("school_id", "grade"),
                    clusters: Sequence[str] = ("school_id",), standardize: bool = True) -> EffectsResult:
    """Student IAT on teacher IAT (or the LOO gap) interacted with Female.

    The student IAT is z-scored (population SD) first unless
    ``standardize=False``.
    """
    data = rows
    if standardize:
        y = rows[outcome].astype(np.float64)
        sd = y.std(ddof=0)
        if not sd > 0:
            raise ValueError("student IAT has zero variance")
        data = rows.assign(**{outcome: (y - y.mean()) / sd})
    return estimate_effects(data, outcome, treatment=treatment, covariates=covariates, fe=fe, clusters=clusters)
