"""Panel data model, delimited-file ingestion, score standardization and
outcome construction.

Tables are held as pandas DataFrames whose columns follow the logical field
names below. A schema document maps logical names to the physical column
names of each file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import (
    DegenerateCellError,
    DuplicateKeyError,
    MissingHistoryError,
    SchemaError,
)

SUBJECTS = ("math", "language_arts", "science")
EXPERIENCE_BANDS = ("none", "<2", "2-5", "6-10", ">10")
CONTRACT_TYPES = ("tenured", "fixed-term", "other")
MISSING_MARKERS = ("", "NA", "na", "NaN", "nan", "null", "NULL", ".")

# (logical name, kind, nullable)
TABLES: dict[str, list[tuple[str, str, bool]]] = {
    "students": [
        ("student_id", "id", False),
        ("female", "bool", False),
        ("age_months", "int", False),
        ("birthplace_code", "cat", False),
        ("language_code", "cat", False),
        ("mother_education", "cat", True),
        ("cct_flag", "bool", True),
        ("school_id", "id", False),
        ("classroom_id", "id", False),
        ("grade", "int", False),
        ("school_year", "int", False),
        ("cohort_projected_grad", "int", True),
    ],
    "scores": [
        ("student_id", "id", False),
        ("teacher_id", "id", False),
        ("subject", "cat", False),
        ("school_year", "int", False),
        ("teacher_score", "float", False),
        ("blind_score", "float", False),
        ("lagged_math", "float", True),
        ("lagged_language", "float", True),
        ("lagged_physed", "float", True),
        ("standardized", "bool", True),
    ],
    "teachers": [
        ("teacher_id", "id", False),
        ("subject", "cat", False),
        ("female", "bool", False),
        ("age_years", "int", False),
        ("contract_type", "cat", False),
        ("experience_public_band", "cat", False),
        ("experience_private_band", "cat", False),
        ("higher_ed_university", "bool", False),
        ("eval_zscore", "float", True),
        ("eval_passed", "bool", True),
        ("school_id", "id", False),
    ],
    "employment": [
        ("worker_id", "id", False),
        ("employer_id", "id", False),
        ("calendar_month", "month", False),
        ("earnings_usd2010", "float", False),
        ("paid_hours", "float", False),
        ("formal_contract", "bool", False),
    ],
}

KEYS = {
    "students": ("student_id", "school_year"),
    "scores": ("student_id", "teacher_id", "subject", "school_year"),
    "teachers": ("teacher_id", "subject"),
    "employment": ("worker_id", "employer_id", "calendar_month"),
}

DEFAULT_FILES = {
    "students": "students.csv",
    "scores": "scores.csv",
    "teachers": "teachers.csv",
    "employment": "employment.csv",
}


@dataclass
class Schema:
    """Maps logical fields to physical columns, per table."""

    delimiter: str = ","
    files: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FILES))
    columns: dict[str, dict[str, str]] = field(default_factory=dict)

    def column(self, table: str, logical: str) -> str:
        return self.columns.get(table, {}).get(logical, logical)

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "Schema":
        delim = doc.get("delimiter", ",")
        if delim in ("tab", "\\t"):
            delim = "\t"
        if delim not in (",", "\t"):
            raise SchemaError(f"unsupported delimiter {delim!r}; use comma or tab")
        files = dict(DEFAULT_FILES)
        columns = {}
        for table, spec in (doc.get("tables") or {}).items():
            if table not in TABLES:
                raise SchemaError(f"unknown table {table!r}")
            spec = spec or {}
            if "file" in spec:
                files[table] = spec["file"]
            cols = dict(spec.get("columns") or {})
            known = {name for name, _, _ in TABLES[table]}
            unknown = set(cols) - known
            if unknown:
                raise SchemaError(f"unknown logical fields for {table}: {sorted(unknown)}")
            columns[table] = cols
        return cls(delimiter=delim, files=files, columns=columns)

    @classmethod
    def load(cls, path) -> "Schema":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
        return cls.from_mapping(doc)

    def to_mapping(self) -> dict:
        return {
            "delimiter": "tab" if self.delimiter == "\t" else ",",
            "tables": {
                t: {"file": self.files[t], "columns": dict(self.columns.get(t, {}))}
                for t in TABLES
            },
        }


@dataclass
class Panel:
    students: pd.DataFrame | None = None
    scores: pd.DataFrame | None = None
    teachers: pd.DataFrame | None = None
    employment: pd.DataFrame | None = None
    rejects: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["table", "line", "reason"])
    )


def _parse_bool(raw: pd.Series):
    s = raw.str.strip().str.lower()
    out = pd.Series(pd.NA, index=raw.index, dtype="boolean")
    out[s.isin(["1", "true", "t", "yes", "y"])] = True
    out[s.isin(["0", "false", "f", "no", "n"])] = False
    bad = out.isna() & ~raw.isin(MISSING_MARKERS)
    return out, bad


def _parse_column(raw: pd.Series, kind: str):
    """Return (parsed series, mask of unparseable non-missing entries)."""
    missing = raw.isin(MISSING_MARKERS)
    if kind in ("id", "cat"):
        out = raw.where(~missing, None).astype(object)
        return out, pd.Series(False, index=raw.index)
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "month":
        ok = raw.str.fullmatch(r"\d{4}-(0[1-9]|1[0-2])")
        out = raw.where(ok, None).astype(object)
        return out, ~ok & ~missing
    num = pd.to_numeric(raw.where(~missing, None), errors="coerce").astype("float64")
    bad = num.isna() & ~missing
    if kind == "int":
        frac = num.notna() & (num != np.floor(num))
        bad = bad | frac
    return num, bad


def _domain_checks(table: str, df: pd.DataFrame) -> list[tuple[pd.Series, str]]:
    checks = []
    if table == "students":
        g = df["grade"].astype("float64")
        checks.append((~g.between(7, 11), "grade out of range"))
        if "cohort_projected_grad" in df:
            c = df["cohort_projected_grad"].astype("float64")
            checks.append((c.notna() & (c < df["school_year"].astype("float64")),
                           "cohort_projected_grad before school_year"))
    elif table == "scores":
        checks.append((~df["subject"].isin(SUBJECTS), "subject not in {math, language_arts, science}"))
    elif table == "teachers":
        checks.append((~df["subject"].isin(SUBJECTS), "subject not in {math, language_arts, science}"))
        for col in ("experience_public_band", "experience_private_band"):
            checks.append((~df[col].isin(EXPERIENCE_BANDS), f"{col} not a known band"))
        checks.append((~df["contract_type"].isin(CONTRACT_TYPES), "contract_type not a known type"))
    elif table == "employment":
        checks.append((df["earnings_usd2010"] < 0, "negative earnings"))
        checks.append((df["paid_hours"] < 0, "negative paid hours"))
    return checks


def load_table(path, table: str, schema: Schema | None = None):
    """Read one delimited file into a validated frame.

    Returns:
        (records, rejects): the typed rows that passed validation, and a frame
        with one row per rejected input line (``table``, ``line``, ``reason``).

    Raises:
        SchemaError: a required column is not mapped or not in the header.
        DuplicateKeyError: two valid rows share the table's key tuple.
    """
    if table not in TABLES:
        raise SchemaError(f"unknown table {table!r}")
    schema = schema or Schema()
    raw = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    header = set(raw.columns)
    data = {}
    bad_rows: dict[int, list[str]] = {}
    for name, kind, nullable in TABLES[table]:
        col = schema.column(table, name)
        if col not in header:
            if nullable:
                data[name] = pd.Series([None] * len(raw), index=raw.index, dtype=object)
                if kind in ("float", "int"):
                    data[name] = data[name].astype("float64")
                elif kind == "bool":
                    data[name] = data[name].astype("boolean")
                continue
            raise SchemaError(f"missing required column {col!r} (field {name!r}) in {path}")
        series, bad = _parse_column(raw[col], kind)
        if not nullable:
            bad = bad | raw[col].isin(MISSING_MARKERS)
        for idx in np.flatnonzero(bad.to_numpy()):
            bad_rows.setdefault(int(idx), []).append(f"invalid {name}")
        data[name] = series
    df = pd.DataFrame(data, index=raw.index)
    ok = pd.Series(True, index=df.index)
    ok[list(bad_rows)] = False
    for mask, reason in _domain_checks(table, df[ok]):
        for idx in np.flatnonzero(mask.fillna(True).to_numpy()):
            row = int(df.index[ok][idx])
            bad_rows.setdefault(row, []).append(reason)
    ok = pd.Series(True, index=df.index)
    ok[list(bad_rows)] = False
    records = df[ok].reset_index(drop=True)
    for name, kind, _ in TABLES[table]:
        if kind == "int" and records[name].notna().all():
            records[name] = records[name].astype("int64")
        elif kind == "bool" and records[name].notna().all():
            records[name] = records[name].astype(bool)
    key = list(KEYS[table])
    dup = records.duplicated(key, keep=False)
    if dup.any():
        tuples = sorted({tuple(r) for r in records.loc[dup, key].itertuples(index=False)}, key=str)
        raise DuplicateKeyError(table, tuples)
    rejects = pd.DataFrame(
        [(table, i + 2, "; ".join(r)) for i, r in sorted(bad_rows.items())],
        columns=["table", "line", "reason"],
    )
    return records, rejects


def load_panel(path, schema: Schema | str | None = None) -> Panel:
    """Load every table present under ``path`` (a directory) or a single file.

    A ``schema.json``/``schema.yaml`` inside the directory is used when no
    schema is passed.
    """
    path = Path(path)
    if isinstance(schema, (str, Path)):
        schema = Schema.load(schema)
    if schema is None:
        for cand in ("schema.json", "schema.yaml", "schema.yml"):
            if path.is_dir() and (path / cand).exists():
                schema = Schema.load(path / cand)
                break
        else:
            schema = Schema()
    panel = Panel()
    rejects = []
    if path.is_file():
        tables = [t for t, f in schema.files.items() if Path(f).name == path.name] or ["scores"]
        records, rej = load_table(path, tables[0], schema)
        setattr(panel, tables[0], records)
        rejects.append(rej)
    else:
        for table in TABLES:
            f = path / schema.files[table]
            if f.exists():
                records, rej = load_table(f, table, schema)
                setattr(panel, table, records)
                rejects.append(rej)
    if rejects:
        panel.rejects = pd.concat(rejects, ignore_index=True)
    return panel


# --------------------------------------------------------------------------
# standardization
# --------------------------------------------------------------------------

SCORE_COLUMNS = ("teacher_score", "blind_score")
LAG_COLUMNS = ("lagged_math", "lagged_language", "lagged_physed")


def _zscore_by(df: pd.DataFrame, col: str, keys: list[str]) -> pd.Series:
    grouped = df.groupby(keys, sort=True)[col]
    mean = grouped.transform("mean")
    sd = grouped.transform(lambda s: s.std(ddof=0))
    bad = df[col].notna() & ~(sd > 0)
    if bad.any():
        cell = tuple(df.loc[bad, keys].iloc[0])
        raise DegenerateCellError(cell, col)
    return (df[col] - mean) / sd


def standardize_scores(obs: pd.DataFrame) -> pd.DataFrame:
    """Z-score teacher and blind scores within each (school_year, subject) cell.

    Uses the population (1/N) standard deviation. Lagged scores are z-scored
    within school_year, the lag's own subject being fixed by its column.

    Raises:
        DegenerateCellError: a cell whose scores have zero variance.
    """
    out = obs.copy()
    for col in SCORE_COLUMNS:
        out[col] = _zscore_by(out, col, ["school_year", "subject"])
    for col in LAG_COLUMNS:
        if col in out and out[col].notna().any():
            out[col] = _zscore_by(out, col, ["school_year"])
    out["standardized"] = True
    return out


def add_missing_indicators(df: pd.DataFrame, columns: Iterable[str]) -> tuple[pd.DataFrame, list[str]]:
    """Impute 0 for missing values and append ``<col>_missing`` indicators.

    Indicators are only added for columns that actually have missing values.
    """
    out = df.copy()
    added = []
    for col in columns:
        miss = out[col].isna()
        if miss.any():
            name = f"{col}_missing"
            out[name] = miss.astype("float64")
            added.append(name)
        out[col] = out[col].astype("float64").fillna(0.0)
    return out, added


# --------------------------------------------------------------------------
# education outcomes
# --------------------------------------------------------------------------

def projected_graduation_year(history) -> int:
    """Project the grade-11 completion year from enrollment rows.

    ``history`` is an iterable of (school_year, grade) pairs or a frame with
    those columns. The earliest observed row is extrapolated assuming normal
    progression: ``year + (11 - grade)``.
    """
    if isinstance(history, pd.DataFrame):
        pairs = list(zip(history["school_year"], history["grade"]))
    else:
        pairs = list(history)
    if not pairs:
        raise MissingHistoryError("no enrollment rows")
    year, grade = min((int(y), int(g)) for y, g in pairs)
    return year + (11 - grade)


def projected_graduation_years(students: pd.DataFrame) -> pd.Series:
    """Vectorized version over a student-year frame, indexed by student_id."""
    first = students.sort_values(["student_id", "school_year", "grade"]).groupby("student_id").first()
    return (first["school_year"] + 11 - first["grade"]).astype("int64")


def build_education_outcomes(events: pd.DataFrame, projected: pd.Series, horizons: Mapping[int, int]) -> pd.DataFrame:
    """On-time and ever indicators for graduation and college milestones.

    Args:
        events: one row per student with nullable event years
            ``grad_year``, ``applied_year``, ``admitted_year``, ``enrolled_year``.
        projected: projected graduation year indexed by student_id.
        horizons: years after projected graduation over which "ever" is
            observable, keyed by cohort (projected graduation year).

    Graduation is on time when it happens by the projected year; college
    milestones are on time when they happen by the year after.
    """
    ev = events.set_index("student_id")
    proj = projected.reindex(ev.index)
    horizon = proj.map(lambda c: horizons.get(int(c), 0) if pd.notna(c) else 0)
    out = pd.DataFrame(index=ev.index)
    on_time_lag = {"grad": 0, "college_applied": 1, "college_admitted": 1, "college_enrolled": 1}
    cols = {"grad": "grad_year", "college_applied": "applied_year",
            "college_admitted": "admitted_year", "college_enrolled": "enrolled_year"}
    for name, col in cols.items():
        y = ev[col].astype("float64") if col in ev else pd.Series(np.nan, index=ev.index)
        lag = on_time_lag[name]
        out[f"{name}_on_time"] = (y <= proj + lag).fillna(False).astype(bool)
        out[f"{name}_ever"] = (y <= proj + lag + horizon).fillna(False).astype(bool)
    # milestones are sequential: enforce admitted => applied, enrolled => admitted
    for horizon_name in ("on_time", "ever"):
        out[f"college_admitted_{horizon_name}"] &= out[f"college_applied_{horizon_name}"]
        out[f"college_enrolled_{horizon_name}"] &= out[f"college_admitted_{horizon_name}"]
    return out.reset_index()


# --------------------------------------------------------------------------
# labor outcomes
# --------------------------------------------------------------------------

DEFAULT_AGE_BINS = {"18-19": (2, 3), "20-21": (4, 5), "22-23": (6, 7)}


def _with_periods(months: pd.DataFrame) -> pd.DataFrame:
    m = months.copy()
    m["year"] = m["calendar_month"].str.slice(0, 4).astype(int)
    m["month"] = m["calendar_month"].str.slice(5, 7).astype(int)
    m["quarter"] = (m["month"] - 1) // 3 + 1
    return m


def dominant_employers(months: pd.DataFrame) -> pd.DataFrame:
    """Dominant annual employer for every (worker_id, year).

    Each quarter's dominant employer pays the largest earnings in that
    quarter; the annual employer dominates the most quarters. Ties fall to
    greater annual earnings, then the lexicographically smallest id.
    """
    m = _with_periods(months)
    m["employer_id"] = m["employer_id"].astype(str)
    annual = m.groupby(["worker_id", "year", "employer_id"], sort=True)["earnings_usd2010"].sum().rename("annual")
    q = m.groupby(["worker_id", "year", "quarter", "employer_id"], sort=True)["earnings_usd2010"].sum().rename("qe").reset_index()
    q = q.join(annual, on=["worker_id", "year", "employer_id"])
    q = q[q["qe"] > 0]
    q = q.sort_values(["worker_id", "year", "quarter", "qe", "annual", "employer_id"],
                      ascending=[True, True, True, False, False, True], kind="mergesort")
    qwin = q.groupby(["worker_id", "year", "quarter"], sort=True).head(1)
    counts = qwin.groupby(["worker_id", "year", "employer_id"], sort=True).size().rename("quarters").reset_index()
    counts = counts.join(annual, on=["worker_id", "year", "employer_id"])
    counts = counts.sort_values(["worker_id", "year", "quarters", "annual", "employer_id"],
                                ascending=[True, True, False, False, True], kind="mergesort")
    return counts.groupby(["worker_id", "year"], sort=True).head(1)[["worker_id", "year", "employer_id"]].reset_index(drop=True)


def dominant_annual_employer(months: pd.DataFrame, worker, year: int):
    """Dominant employer of one worker in one calendar year, or None."""
    sub = months[(months["worker_id"] == worker) & (months["calendar_month"].str.startswith(f"{int(year):04d}-"))]
    if sub.empty:
        return None
    dom = dominant_employers(sub)
    return None if dom.empty else dom["employer_id"].iloc[0]


def _longest_run(months_sorted: np.ndarray) -> int:
    best = run = 0
    prev = None
    for m in months_sorted:
        run = run + 1 if prev is not None and m == prev + 1 else 1
        best = max(best, run)
        prev = m
    return best


def build_labor_outcomes(
    months: pd.DataFrame,
    students: pd.DataFrame,
    age_bins: Mapping[str, tuple[int, int]] = DEFAULT_AGE_BINS,
    spell_months: int = 1,
) -> pd.DataFrame:
    """Formal employment, earnings and hours per age bin.

    Args:
        months: EmploymentMonth rows.
        students: frame with ``student_id`` and ``cohort_projected_grad``.
        age_bins: bin label -> (first, last) year offset from the projected
            graduation year.
        spell_months: consecutive formal months with the dominant employer
            needed to count as employed.

    Earnings and hours are monthly means over months paid by the dominant
    annual employer (conditional, NaN when not employed); the unconditional
    versions are 0 for the non-employed.
    """
    students = students[["student_id", "cohort_projected_grad"]].drop_duplicates("student_id")
    out = students[["student_id"]].reset_index(drop=True).copy()
    if months is None or months.empty:
        m = pd.DataFrame(columns=["worker_id", "year", "month", "earnings_usd2010", "paid_hours", "formal_contract"])
    else:
        m = _with_periods(months)
        m["employer_id"] = m["employer_id"].astype(str)
        dom = dominant_employers(months)
        m = m.merge(dom.rename(columns={"employer_id": "dominant"}), on=["worker_id", "year"], how="inner")
        m = m[(m["employer_id"] == m["dominant"]) & (m["earnings_usd2010"] > 0)]
    grad = dict(zip(students["student_id"], students["cohort_projected_grad"]))
    m = m[m["worker_id"].isin(grad)]
    m = m.assign(offset=m["year"] - m["worker_id"].map(grad))
    for label, (lo, hi) in age_bins.items():
        sub = m[(m["offset"] >= lo) & (m["offset"] <= hi)]
        employed, earn, hours = {}, {}, {}
        for wid, grp in sub.groupby("worker_id", sort=True):
            formal = grp[grp["formal_contract"].astype(bool)]
            idx = np.sort((formal["year"] * 12 + formal["month"]).to_numpy())
            employed[wid] = _longest_run(np.unique(idx)) >= spell_months
            earn[wid] = float(grp["earnings_usd2010"].mean())
            hours[wid] = float(grp["paid_hours"].mean())
        emp = out["student_id"].map(lambda w: employed.get(w, False)).astype(bool)
        out[f"employed_formal_{label}"] = emp
        e = out["student_id"].map(earn).astype("float64").where(emp)
        h = out["student_id"].map(hours).astype("float64").where(emp)
        out[f"earnings_cond_{label}"] = e
        out[f"earnings_uncond_{label}"] = e.fillna(0.0)
        out[f"hours_cond_{label}"] = h
        out[f"hours_uncond_{label}"] = h.fillna(0.0)
    return out


def attach_students(scores: pd.DataFrame, students: pd.DataFrame, columns=("female", "school_id", "classroom_id", "grade")) -> pd.DataFrame:
    """Merge student-year attributes onto score rows by (student_id, school_year).

    Score rows without a matching student record are dropped.
    """
    cols = ["student_id", "school_year"] + [c for c in columns if c in students and c not in scores]
    return scores.merge(students[cols], on=["student_id", "school_year"], how="inner", validate="many_to_one")
