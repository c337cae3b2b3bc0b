"""Synthetic panels with known ground truth.

Latent (standardized-scale) scores for student i of teacher j:

    blind   = a1_j + a2_j M_i + b_B z_i + q (z_i^2 - 1) + u a_i + eta_i
    teacher = a1_j + (a2_j + theta_j) M_i + b_T z_i + q (z_i^2 - 1) + u a_i + eta'_i

with z_i the lagged-math latent score and M_i = 1 for boys. The loadings
b_B, b_T are solved so each latent score has population variance 1; raw
points are 50 + 10 * latent, so standardizing by year and subject recovers
the latent scale and theta_j stays in score-SD units.

Every entity draws from its own counter-based stream (Philox keyed by
(seed, domain, entity ids)), so adding teachers leaves existing draws
untouched.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError
from .panel import CONTRACT_TYPES, EXPERIENCE_BANDS

RNG_ALGORITHM = "numpy.random.Philox(SeedSequence(seed, spawn_key=(domain, *ids)))"

# stream domains
_TEACHER, _CLASS, _OUTCOME, _IAT, _EMPLOY, _AUX = 1, 2, 3, 4, 5, 6


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

@dataclass
class PriorSpec:
    """Distribution of theta_j: gaussian, mixture or point mass."""

    kind: str = "gaussian"
    mean: float = -0.2978
    sd: float = 0.0973
    weights: tuple = ()
    means: tuple = ()
    sds: tuple = ()

    def validate(self):
        if self.kind == "gaussian":
            if self.sd < 0:
                raise ConfigError("prior sd must be >= 0")
        elif self.kind == "mixture":
            w = np.asarray(self.weights, dtype=float)
            if not (len(w) == len(self.means) == len(self.sds)) or len(w) == 0:
                raise ConfigError("mixture needs equal-length weights, means and sds")
            if np.any(w < 0) or abs(w.sum() - 1) > 1e-12 or np.any(np.asarray(self.sds) < 0):
                raise ConfigError("mixture weights must be probabilities summing to 1 and sds >= 0")
        elif self.kind != "point":
            raise ConfigError(f"unknown prior kind {self.kind!r}")

    def moments(self) -> tuple[float, float]:
        if self.kind == "gaussian":
            return self.mean, self.sd ** 2
        if self.kind == "point":
            return self.mean, 0.0
        w, m, s = (np.asarray(v, dtype=float) for v in (self.weights, self.means, self.sds))
        mu = float(w @ m)
        return mu, float(w @ (s ** 2 + m ** 2) - mu ** 2)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.mean + self.sd * rng.standard_normal(n)
        if self.kind == "point":
            return np.full(n, float(self.mean))
        w = np.asarray(self.weights, dtype=float)
        comp = rng.choice(len(w), size=n, p=w)
        z = rng.standard_normal(n)
        return np.asarray(self.means, dtype=float)[comp] + np.asarray(self.sds, dtype=float)[comp] * z

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "PriorSpec":
        doc = dict(doc)
        for k in ("weights", "means", "sds"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)


# --------------------------------------------------------------------------
# main panel
# --------------------------------------------------------------------------

@dataclass
class DgpConfig:
    seed: int
    J: int = 500
    students_per_teacher: int = 40
    subjects: tuple = ("math",)
    years: tuple = (2015,)
    female_share: float = 0.5
    prior: PriorSpec = field(default_factory=PriorSpec)
    va_sd_female: float = 0.2
    va_sd_male: float = 0.2
    va_mean_female: float = 0.0
    va_mean_male: float = -0.05
    corr_va: float = 0.9            # corr(VA_f, VA_m)
    corr_theta_va_female: float = 0.0
    corr_theta_va_male: float = 0.0
    quadratic: float = 0.05
    ability_sd: float = 0.0         # u: shared student shock in both equations
    noise_sd_blind: float = 0.5
    noise_sd_teacher: float = 0.5
    cross_corr: float = 0.0         # corr(eta, eta')
    lag_corr_language: float = 0.6
    lag_corr_physed: float = 0.3
    teachers_per_school: int = 4
    schools_per_location: int = 5
    delta: tuple = (0.8, -0.0151, 0.02, 0.0)   # outcome LPM: d0, d1 (theta*female), d2 (female), d3 (theta)
    outcome_noise: float = 0.0      # extra mean-zero shift SD folded into the LPM index
    confounded: float = 0.0         # loading of the unobserved outcome shock on theta
    missing_lag_share: float = 0.0
    employment: bool = False

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.J < 1 or self.students_per_teacher < 1:
            raise ConfigError("J and students_per_teacher must be positive")
        if not 0 <= self.female_share <= 1:
            raise ConfigError("female_share must be a probability")
        for name in ("va_sd_female", "va_sd_male", "quadratic", "ability_sd", "noise_sd_blind",
                     "noise_sd_teacher", "outcome_noise", "missing_lag_share"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("corr_va", "corr_theta_va_female", "corr_theta_va_male", "cross_corr",
                     "lag_corr_language", "lag_corr_physed"):
            if abs(getattr(self, name)) > 1:
                raise ConfigError(f"{name} must lie in [-1, 1]")
        if self.missing_lag_share > 1:
            raise ConfigError("missing_lag_share must be a probability")
        self.prior.validate()
        self.va_loadings()
        self.lag_loadings()

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "DgpConfig":
        doc = dict(doc)
        if "seed" not in doc:
            raise ConfigError("seed is mandatory")
        if "prior" in doc:
            doc["prior"] = PriorSpec.from_mapping(doc["prior"])
        for k in ("subjects", "years", "delta"):
            if k in doc:
                doc[k] = tuple(doc[k])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def to_mapping(self) -> dict:
        d = asdict(self)
        for k in ("subjects", "years", "delta"):
            d[k] = list(d[k])
        for k in ("weights", "means", "sds"):
            d["prior"][k] = list(d["prior"][k])
        return d

    def va_loadings(self):
        """Coefficients so that (t, e1, e2) iid N(0,1) map to correlated (VA_f, VA_m)."""
        rf, rm, rfm = self.corr_theta_va_female, self.corr_theta_va_male, self.corr_va
        a_f = np.sqrt(1 - rf ** 2)
        a = (rfm - rm * rf) / a_f if a_f > 0 else 0.0
        rest = 1 - rm ** 2 - a ** 2
        if rest < -1e-12:
            raise ConfigError("correlations of (theta, VA_f, VA_m) are not positive semidefinite")
        return rf, a_f, rm, a, np.sqrt(max(rest, 0.0))

    def truth_moments(self) -> dict:
        mt, vt = self.prior.moments()
        st = np.sqrt(vt)
        rf = self.corr_theta_va_female if st > 0 else 0.0
        rm = self.corr_theta_va_male if st > 0 else 0.0
        sf, sm = self.va_sd_female, self.va_sd_male
        cov = np.array([
            [vt, rf * st * sf, rm * st * sm],
            [rf * st * sf, sf ** 2, self.corr_va * sf * sm],
            [rm * st * sm, self.corr_va * sf * sm, sm ** 2],
        ])
        return {"theta_mean": mt, "theta_var": vt, "cov": cov,
                "means": np.array([mt, self.va_mean_female, self.va_mean_male])}

    def lag_loadings(self) -> tuple[float, float]:
        """b_B and b_T giving unit-variance latent scores."""
        m = self.truth_moments()
        cov, means = m["cov"], m["means"]
        p = 1 - self.female_share
        var_a1 = cov[1, 1]
        var_a2 = cov[1, 1] + cov[2, 2] - 2 * cov[1, 2]
        cov_a1_a2 = cov[1, 2] - cov[1, 1]
        e_a2 = means[2] - means[1]
        cov_th_a2 = cov[0, 2] - cov[0, 1]
        common = 2 * self.quadratic ** 2 + self.ability_sd ** 2
        out = []
        for c_mean, c_var, cov_a1_c, sig in (
            (e_a2, var_a2, cov_a1_a2, self.noise_sd_blind),
            (e_a2 + m["theta_mean"], var_a2 + m["theta_var"] + 2 * cov_th_a2, cov_a1_a2 + cov[0, 1],
             self.noise_sd_teacher),
        ):
            e_c2 = c_var + c_mean ** 2
            rest = var_a1 + e_c2 * p - (c_mean * p) ** 2 + 2 * p * cov_a1_c + common + sig ** 2
            if rest > 1:
                raise ConfigError(f"structural variance {rest:.4f} exceeds 1; reduce noise or effect sizes")
            out.append(float(np.sqrt(1 - rest)))
        return out[0], out[1]


@dataclass
class GroundTruth:
    teachers: pd.DataFrame        # teacher_id, subject, theta, va_female, va_male, alpha1, alpha2
    prior: dict
    coefficients: dict
    corr: np.ndarray              # population correlation of (theta, VA_f, VA_m)
    rng: str = RNG_ALGORITHM
    notes: dict = field(default_factory=dict)

    def to_mapping(self) -> dict:
        return {
            "rng": self.rng,
            "prior": self.prior,
            "coefficients": self.coefficients,
            "corr_theta_vaf_vam": self.corr.tolist(),
            "notes": self.notes,
            "teachers": self.teachers.to_dict(orient="list"),
        }


def _teacher_id(subject_idx: int, j: int) -> str:
    return f"t{subject_idx}{j:05d}"


def _draw_teachers(cfg: DgpConfig) -> pd.DataFrame:
    rf, a_f, rm, a, b = cfg.va_loadings()
    mt, vt = cfg.prior.moments()
    st = np.sqrt(vt)
    rows = []
    for si, subject in enumerate(cfg.subjects):
        for j in range(cfg.J):
            rng = stream(cfg.seed, _TEACHER, si, j)
            theta = float(cfg.prior.draw(rng, 1)[0])
            t = (theta - mt) / st if st > 0 else 0.0
            e1, e2 = rng.standard_normal(2)
            va_f = cfg.va_mean_female + cfg.va_sd_female * (rf * t + a_f * e1)
            va_m = cfg.va_mean_male + cfg.va_sd_male * (rm * t + a * e1 + b * e2)
            school = j // cfg.teachers_per_school
            rows.append({
                "teacher_id": _teacher_id(si, j), "subject": subject, "j": j, "theta": theta,
                "va_female": va_f, "va_male": va_m, "alpha1": va_f, "alpha2": va_m - va_f,
                "school_id": f"s{school:05d}", "school_location": f"l{school // cfg.schools_per_location:04d}",
                "female": bool(rng.random() < 0.6), "age_years": int(rng.integers(25, 65)),
                "contract_type": CONTRACT_TYPES[int(rng.integers(0, 3))],
                "experience_public_band": EXPERIENCE_BANDS[int(rng.integers(0, 5))],
                "experience_private_band": EXPERIENCE_BANDS[int(rng.integers(0, 5))],
                "higher_ed_university": bool(rng.random() < 0.4),
                "eval_zscore": float(rng.standard_normal()) if rng.random() < 0.8 else np.nan,
                "eval_passed": bool(rng.random() < 0.5),
            })
    return pd.DataFrame(rows)


def generate(config: DgpConfig) -> tuple[dict, GroundTruth]:
    """Simulate students, scores, teachers (and optionally employment and
    outcomes) from the structural score equations.

    Returns:
        (tables, truth): ``tables`` maps table name to DataFrame in the
        layout panel-core reads; ``truth`` holds the planted parameters.
    """
    cfg = config
    cfg.validate()
    b_blind, b_teacher = cfg.lag_loadings()
    teachers = _draw_teachers(cfg)
    mt, vt = cfg.prior.moments()
    st = np.sqrt(vt)
    q, u = cfg.quadratic, cfg.ability_sd
    rho = cfg.cross_corr
    d0, d1, d2, d3 = cfg.delta
    n = cfg.students_per_teacher
    students, scores, outcomes = [], [], []
    by_subject = {s: teachers[teachers["subject"] == s].reset_index(drop=True) for s in cfg.subjects}
    first = by_subject[cfg.subjects[0]]
    n_clipped = 0
    for yi, year in enumerate(cfg.years):
        for j in range(cfg.J):
            rng = stream(cfg.seed, _CLASS, yi, j)
            female = rng.random(n) < cfg.female_share
            male = (~female).astype(np.float64)
            z = rng.standard_normal(n)
            lang = cfg.lag_corr_language * z + np.sqrt(1 - cfg.lag_corr_language ** 2) * rng.standard_normal(n)
            phys = cfg.lag_corr_physed * z + np.sqrt(1 - cfg.lag_corr_physed ** 2) * rng.standard_normal(n)
            ability = rng.standard_normal(n)
            miss = rng.random((n, 3)) < cfg.missing_lag_share
            ids = [f"i{yi}{j:05d}{k:03d}" for k in range(n)]
            school = first.loc[j, "school_id"]
            students.append(pd.DataFrame({
                "student_id": ids, "female": female,
                "age_months": rng.integers(150, 170, n),
                "birthplace_code": np.array(["b1", "b2", "b3", "b4", "b5"])[rng.integers(0, 5, n)],
                "language_code": np.where(rng.random(n) < 0.85, "es", "qu"),
                "mother_education": np.where(rng.random(n) < 0.05, None,
                                             np.array(["primary", "secondary", "higher"])[rng.integers(0, 3, n)]),
                "cct_flag": rng.random(n) < 0.3,
                "school_id": school, "classroom_id": f"c{j:05d}_{year}", "grade": 8,
                "school_year": year, "cohort_projected_grad": year + 3,
            }))
            for si, subject in enumerate(cfg.subjects):
                t = by_subject[subject].loc[j]
                srng = stream(cfg.seed, _CLASS, yi, j, si + 1)
                e1 = srng.standard_normal(n)
                e2 = rho * e1 + np.sqrt(1 - rho ** 2) * srng.standard_normal(n)
                common = t["alpha1"] + t["alpha2"] * male + q * (z * z - 1) + u * ability
                blind = common + b_blind * z + cfg.noise_sd_blind * e1
                teacher = common + t["theta"] * male + b_teacher * z + cfg.noise_sd_teacher * e2
                lag = {
                    "lagged_math": np.where(miss[:, 0], np.nan, 50 + 10 * z),
                    "lagged_language": np.where(miss[:, 1], np.nan, 50 + 10 * lang),
                    "lagged_physed": np.where(miss[:, 2], np.nan, 50 + 10 * phys),
                }
                scores.append(pd.DataFrame({
                    "student_id": ids, "teacher_id": t["teacher_id"], "subject": subject, "school_year": year,
                    "teacher_score": 50 + 10 * teacher, "blind_score": 50 + 10 * blind, **lag,
                    "standardized": False,
                }))
            # outcome: linear probability in the standardized planted theta of the first subject
            orng = stream(cfg.seed, _OUTCOME, yi, j)
            tstd = (first.loc[j, "theta"] - mt) / st if st > 0 else 0.0
            fem = female.astype(np.float64)
            shock = cfg.outcome_noise * orng.standard_normal(n) + cfg.confounded * tstd
            p = d0 + d1 * tstd * fem + d2 * fem + d3 * tstd + shock
            clipped = (p < 0) | (p > 1)
            n_clipped += int(clipped.sum())
            grad = orng.random(n) < np.clip(p, 0, 1)
            outcomes.append(pd.DataFrame({"student_id": ids, "grad_ever": grad,
                                          "theta_std_true": tstd, "teacher_id": first.loc[j, "teacher_id"]}))
    tables = {
        "students": pd.concat(students, ignore_index=True),
        "scores": pd.concat(scores, ignore_index=True),
        "teachers": teachers[["teacher_id", "subject", "female", "age_years", "contract_type",
                              "experience_public_band", "experience_private_band", "higher_ed_university",
                              "eval_zscore", "eval_passed", "school_id"]].copy(),
        "outcomes": pd.concat(outcomes, ignore_index=True),
    }
    tables["teachers"]["school_location"] = teachers["school_location"].to_numpy()
    if cfg.employment:
        tables["employment"] = _employment(cfg, tables["students"])
    m = cfg.truth_moments()
    sd = np.sqrt(np.diag(m["cov"]))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = m["cov"] / np.outer(sd, sd)
    corr[~np.isfinite(corr)] = 0.0
    np.fill_diagonal(corr, 1.0)
    truth = GroundTruth(
        teachers=teachers[["teacher_id", "subject", "theta", "va_female", "va_male", "alpha1", "alpha2"]].copy(),
        prior={**asdict(cfg.prior), "mean_theta": m["theta_mean"], "var_theta": m["theta_var"]},
        coefficients={"b_blind": b_blind, "b_teacher": b_teacher, "quadratic": q, "ability_sd": u,
                      "delta": list(cfg.delta), "cross_corr": rho},
        corr=corr,
        notes={"outcome_probabilities_clipped": n_clipped},
    )
    return tables, truth


def _employment(cfg: DgpConfig, students: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for k, (sid, grad_year) in enumerate(zip(students["student_id"], students["cohort_projected_grad"])):
        rng = stream(cfg.seed, _EMPLOY, k)
        if rng.random() > 0.4:
            continue
        year = int(grad_year) + int(rng.integers(2, 8))
        start = int(rng.integers(1, 13))
        length = int(rng.integers(1, 13 - start + 1))
        employer = f"e{int(rng.integers(0, 200)):04d}"
        formal = bool(rng.random() < 0.3)
        for mth in range(start, start + length):
            rows.append((sid, employer, f"{year:04d}-{mth:02d}", float(np.round(rng.lognormal(5.5, 0.4), 2)),
                         float(np.round(rng.uniform(40, 200), 1)), formal))
    return pd.DataFrame(rows, columns=["worker_id", "employer_id", "calendar_month", "earnings_usd2010",
                                       "paid_hours", "formal_contract"])


# --------------------------------------------------------------------------
# teacher-level helpers
# --------------------------------------------------------------------------

def generate_gap_estimates(J: int, prior: PriorSpec, se: float | Sequence[float], seed: int,
                           n_students: int = 40) -> pd.DataFrame:
    """theta_hat_j = theta_j + s_j e_j directly, for shrinkage experiments."""
    rng = stream(seed, _AUX, 1)
    theta = prior.draw(rng, J)
    s = np.broadcast_to(np.asarray(se, dtype=np.float64), (J,)).copy()
    th = theta + s * rng.standard_normal(J)
    return pd.DataFrame({
        "teacher_id": [f"t{j:05d}" for j in range(J)], "subject": "math", "theta_hat": th, "se": s,
        "n_female": n_students // 2, "n_male": n_students - n_students // 2, "years": "2015", "theta": theta,
    })


def _unit_residual_sd(*explained: float) -> float:
    rest = 1 - sum(explained)
    if rest < 0:
        raise ConfigError("planted effects explain more than the unit variance")
    return float(np.sqrt(rest))


def generate_teacher_covariate_panel(J: int, female_effect: float, seed: int, theta_sd: float = 0.0973,
                                     theta_mean: float = -0.2978, teachers_per_school: int = 4,
                                     school_sd: float = 0.3, se_range=(0.05, 0.15)) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Gap estimates and teacher records where theta/sd depends on teacher gender.

    theta_j / theta_sd = female_effect * female_j + school_s + e_j, with the
    three parts summing to unit variance.
    """
    rng = stream(seed, _AUX, 2)
    n_schools = int(np.ceil(J / teachers_per_school))
    school_eff = school_sd * rng.standard_normal(n_schools)
    school = np.arange(J) // teachers_per_school
    female = rng.random(J) < 0.5
    resid = _unit_residual_sd(female_effect ** 2 * 0.25, school_sd ** 2)
    std = female_effect * (female - 0.5) + school_eff[school] + resid * rng.standard_normal(J)
    theta = theta_mean + theta_sd * std
    s = rng.uniform(*se_range, J)
    ids = [f"t{j:05d}" for j in range(J)]
    gaps = pd.DataFrame({"teacher_id": ids, "subject": "math", "theta_hat": theta + s * rng.standard_normal(J),
                         "se": s, "n_female": 20, "n_male": 20, "years": "2015", "theta": theta})
    teachers = pd.DataFrame({
        "teacher_id": ids, "subject": "math", "female": female,
        "age_years": rng.integers(25, 65, J),
        "contract_type": np.array(CONTRACT_TYPES)[rng.integers(0, 3, J)],
        "eval_zscore": np.where(rng.random(J) < 0.8, rng.standard_normal(J), np.nan),
        "school_id": [f"s{k:05d}" for k in school],
    })
    return gaps, teachers


def generate_teacher_iat_panel(J: int, slope: float, seed: int, theta_sd: float = 0.0973,
                               theta_mean: float = -0.2978, teachers_per_location: int = 10,
                               location_sd: float = 0.3, se_range=(0.05, 0.15)) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Gap estimates and teacher IAT records with theta/sd = slope * iat + location + e."""
    rng = stream(seed, _AUX, 3)
    n_loc = int(np.ceil(J / teachers_per_location))
    loc = np.arange(J) // teachers_per_location
    loc_eff = location_sd * rng.standard_normal(n_loc)
    iat = rng.standard_normal(J)
    resid = _unit_residual_sd(slope ** 2, location_sd ** 2)
    std = slope * iat + loc_eff[loc] + resid * rng.standard_normal(J)
    theta = theta_mean + theta_sd * std
    s = rng.uniform(*se_range, J)
    ids = [f"t{j:05d}" for j in range(J)]
    gaps = pd.DataFrame({"teacher_id": ids, "subject": "math", "theta_hat": theta + s * rng.standard_normal(J),
                         "se": s, "n_female": 20, "n_male": 20, "years": "2015", "theta": theta})
    frame = pd.DataFrame({"teacher_id": ids, "iat_std": (iat - iat.mean()) / iat.std(),
                          "school_location": [f"l{k:04d}" for k in loc],
                          "female": rng.random(J) < 0.6, "block_order": rng.integers(0, 2, J)})
    return gaps, frame


# --------------------------------------------------------------------------
# student-level effect panels
# --------------------------------------------------------------------------

def generate_exposure_panel(n_students: int, delta: Sequence[float], seed: int, n_schools: int = 200,
                            grades: Sequence[int] = (8, 9, 10), cohorts: Sequence[int] = (2015, 2016, 2017, 2018, 2019),
                            teachers_per_school_grade: int = 2, school_sd: float = 0.05) -> tuple[pd.DataFrame, dict]:
    """Stacked student x grade exposure rows with a linear-probability outcome.

    Each student is observed once per grade with that grade's teacher, whose
    standardized exposure theta is iid N(0, 1) across teachers. The outcome
    is student-level and repeated across the student's rows:
    P(Y=1) = d0 + d2 F + school + sum_g (d1 theta_g F + d3 theta_g).
    Exposures in other grades are independent of a row's own exposure, so
    the stacked row-level regression estimates (d1, d2-shifted, d3).
    """
    d0, d1, d2, d3 = delta
    rng = stream(seed, _AUX, 4)
    grades = list(grades)
    G = len(grades)
    school_eff = school_sd * rng.standard_normal(n_schools)
    teach = rng.standard_normal((n_schools, G, teachers_per_school_grade))
    school = rng.integers(0, n_schools, n_students)
    cohort = np.asarray(cohorts)[rng.integers(0, len(cohorts), n_students)]
    female = rng.random(n_students) < 0.5
    which = rng.integers(0, teachers_per_school_grade, (n_students, G))
    theta = teach[school[:, None], np.arange(G)[None, :], which]
    fem = female.astype(np.float64)
    p = d0 + d2 * fem + school_eff[school] + (d1 * fem[:, None] * theta + d3 * theta).sum(axis=1)
    clipped = int(((p < 0) | (p > 1)).sum())
    y = (rng.random(n_students) < np.clip(p, 0, 1)).astype(np.float64)
    rows = pd.DataFrame({
        "student_id": np.repeat(np.arange(n_students), G),
        "grade": np.tile(grades, n_students),
        "cohort": np.repeat(cohort, G),
        "school_id": np.repeat(school, G),
        "female": np.repeat(female, G),
        "theta_star_loo": theta.ravel(),
        "teacher_id": (np.repeat(school, G) * 1000 + np.tile(np.arange(G), n_students) * 10 + which.ravel()),
        "y": np.repeat(y, G),
    })
    rows["school_year"] = rows["cohort"] - (11 - rows["grade"])
    return rows, {"delta": list(delta), "clipped": clipped}


def generate_student_iat_panel(n_students: int, nu: Sequence[float], seed: int, n_schools: int = 100,
                               grades: Sequence[int] = (8, 9, 10), teachers_per_school_grade: int = 2,
                               school_sd: float = 0.2) -> tuple[pd.DataFrame, dict]:
    """Students with a teacher IAT exposure and their own standardized IAT.

    iat_i = nu0 + nu1 IAT_j F + nu2 F + nu3 IAT_j + school + e, with the
    error variance set so the population variance of iat_i is 1.
    """
    nu0, nu1, nu2, nu3 = nu
    rng = stream(seed, _AUX, 5)
    G = len(grades)
    school = rng.integers(0, n_schools, n_students)
    grade = np.asarray(grades)[rng.integers(0, G, n_students)]
    gi = np.searchsorted(np.asarray(grades), grade)
    teacher_iat = rng.standard_normal((n_schools, G, teachers_per_school_grade))
    which = rng.integers(0, teachers_per_school_grade, n_students)
    x = teacher_iat[school, gi, which]
    female = rng.random(n_students) < 0.5
    fem = female.astype(np.float64)
    school_eff = school_sd * rng.standard_normal(n_schools)
    # population variance of the systematic part with F ~ Bern(1/2), x ~ N(0, 1)
    sys_var = 0.5 * (nu1 + nu3) ** 2 + 0.5 * nu3 ** 2 + 0.25 * nu2 ** 2 + school_sd ** 2
    resid = _unit_residual_sd(sys_var)
    iat = nu0 + nu1 * x * fem + nu2 * fem + nu3 * x + school_eff[school] + resid * rng.standard_normal(n_students)
    rows = pd.DataFrame({
        "student_id": np.arange(n_students), "school_id": school, "grade": grade, "female": female,
        "teacher_iat": x, "teacher_id": school * 1000 + gi * 10 + which, "student_iat": iat,
    })
    return rows, {"nu": list(nu)}


# --------------------------------------------------------------------------
# IAT logs
# --------------------------------------------------------------------------

@dataclass
class LatencyModel:
    shift_ms: float = 300.0
    log_mean: float = float(np.log(500.0))
    log_sd: float = 0.35
    practice_trials: int = 20
    test_trials: int = 40
    error_rate: float = 0.0

    def within_sd(self) -> float:
        s2 = self.log_sd ** 2
        return float(np.sqrt((np.exp(s2) - 1) * np.exp(2 * self.log_mean + s2)))


def iat_offset(d: float, model: LatencyModel) -> float:
    """Mean latency shift giving population D = d for equal block sizes."""
    if abs(d) >= 2:
        raise ConfigError(f"target D {d} is infeasible under the latency model (|D| must be < 2)")
    return d * model.within_sd() / np.sqrt(1 - d * d / 4)


def generate_iat(d_true: float | Sequence[float], seed: int, n_respondents: int | None = None,
                 model: LatencyModel | None = None, scale: float = 1.0) -> pd.DataFrame:
    """Trial logs whose population D-score equals the target per respondent.

    Compatible latencies are shift + lognormal; incompatible ones add the
    offset implied by the target D. ``scale`` multiplies every latency
    (after drawing) to exercise scale invariance.
    """
    model = model or LatencyModel()
    d = np.atleast_1d(np.asarray(d_true, dtype=np.float64))
    if n_respondents is not None:
        d = np.broadcast_to(d, (n_respondents,)) if d.size == 1 else d
    frames = []
    for r, target in enumerate(d):
        delta = iat_offset(float(target), model)
        rng = stream(seed, _IAT, r)
        parts = []
        for block, n in (("practice_compatible", model.practice_trials), ("practice_incompatible", model.practice_trials),
                         ("test_compatible", model.test_trials), ("test_incompatible", model.test_trials)):
            lat = model.shift_ms + rng.lognormal(model.log_mean, model.log_sd, n)
            if block.endswith("_incompatible"):
                lat = lat + delta
            correct = rng.random(n) >= model.error_rate
            parts.append(pd.DataFrame({"block": block, "latency_ms": lat * scale, "correct": correct}))
        f = pd.concat(parts, ignore_index=True)
        f.insert(0, "respondent_id", r)
        f.insert(2, "trial_index", np.arange(len(f)))
        frames.append(f)
    return pd.concat(frames, ignore_index=True)
