"""Command-line pipeline: simulate -> gaps -> hetero -> eb -> iat-score -> effects -> report.

Every subcommand writes its artifacts plus a ``manifest.json`` (config,
input digests, tool version, wall time) into ``--out``. Exit codes: 0 on
success, 1 on validation errors (a JSON error report is written to
``--out/error.json`` when possible and to stderr), 2 on internal errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import yaml
from threadpoolctl import threadpool_limits

from . import __version__, eb, effects, iat, synthetic
from .errors import ConfigError, GradeGapError
from .gaps import CovariateSpec, estimate_system, teacher_gaps, va_correlation_report
from .heterogeneity import (
    characteristics_regression,
    cross_subject_report,
    iat_relation_regression,
    variance_decomposition,
)
from .io import MANIFEST, Run, input_digests, read_csv, write_json
from .panel import SUBJECTS, attach_students, load_panel, load_table, standardize_scores

COMMANDS = ("simulate", "gaps", "hetero", "eb", "iat-score", "effects", "report")
DEFAULT_TEACHER_COVARIATES = ("female", "age_years", "contract_type", "experience_public_band",
                              "higher_ed_university")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradegap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML or JSON run configuration")
        p.add_argument("--in", dest="inp", type=Path, help="input directory or file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--subject", choices=SUBJECTS)
        p.add_argument("--method", choices=("gaussian", "deconvolve"), help="empirical Bayes posterior")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int)
        p.add_argument("--schema", type=Path, help="panel schema document")
        if name == "eb":
            p.add_argument("--calibrate", action="store_true", help="scan the penalty c0")
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return doc


def _require_input(args) -> Path:
    if args.inp is None:
        raise ConfigError(f"{args.command} needs --in")
    if not args.inp.exists():
        raise ConfigError(f"input path {args.inp} does not exist")
    return args.inp


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map over independent work items; results merge in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _covariate_spec(doc: dict) -> CovariateSpec:
    kw = {k: doc[k] for k in ("quadratic",) if k in doc}
    if "lags" in doc:
        kw["lags"] = tuple(doc["lags"])
    if "extra" in doc:
        kw["extra"] = tuple(doc["extra"])
    return CovariateSpec(**kw)


def _observations(inp: Path, schema, subject: str | None):
    panel = load_panel(inp, schema)
    if panel.scores is None or panel.students is None:
        raise ConfigError(f"{inp} must contain scores and students tables")
    obs = standardize_scores(attach_students(panel.scores, panel.students))
    if subject:
        obs = obs[obs["subject"] == subject]
    if obs.empty:
        raise ConfigError("no score rows left after filtering")
    return panel, obs


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args, cfg, run: Run):
    doc = dict(cfg.get("simulate", {}))
    seed = args.seed if args.seed is not None else doc.get("seed", cfg.get("seed"))
    if seed is None:
        raise ConfigError("simulate needs --seed or a seed in the config")
    doc["seed"] = int(seed)
    iat_doc = doc.pop("iat", None)
    dgp = synthetic.DgpConfig.from_mapping(doc)
    run.config["simulate"] = dgp.to_mapping()
    tables, truth = synthetic.generate(dgp)
    for name in ("students", "scores", "teachers", "employment", "outcomes"):
        if name in tables:
            run.csv(tables[name], f"{name}.csv")
    run.csv(truth.teachers, "truth_teachers.csv")
    run.json(truth.to_mapping(), "truth.json")
    if iat_doc is not None:
        teachers = tables["teachers"].drop_duplicates("teacher_id").reset_index(drop=True)
        rng = synthetic.stream(dgp.seed, 6, 1)  # auxiliary stream domain
        d = np.clip(rng.normal(iat_doc.get("d_mean", 0.301), iat_doc.get("d_sd", 0.35), len(teachers)), -1.9, 1.9)
        logs = synthetic.generate_iat(d, dgp.seed)
        logs["respondent_id"] = teachers["teacher_id"].to_numpy()[logs["respondent_id"].to_numpy()]
        run.csv(logs, "iat_trials.csv")
        run.csv(pd.DataFrame({"teacher_id": teachers["teacher_id"], "d_true": d}), "truth_iat.csv")


def cmd_gaps(args, cfg, run: Run):
    doc = cfg.get("gaps", {})
    _, obs = _observations(_require_input(args), args.schema, args.subject)
    spec = _covariate_spec(doc)
    system = doc.get("method", "separate")
    min_cell = int(doc.get("min_cell", 2))

    def one(subject):
        fit = estimate_system(obs[obs["subject"] == subject], spec, method=system)
        return fit, teacher_gaps(fit, min_cell)

    subjects = sorted(obs["subject"].unique())
    results = _pmap(one, subjects, args.threads)
    gaps = pd.concat([g for _, g in results], ignore_index=True)
    run.csv(gaps, "gaps.csv")
    summary = {}
    for subject, (fit, g) in zip(subjects, results):
        rep = va_correlation_report(fit, min_cell=min_cell)
        run.csv(rep.frame().reset_index(names="parameter"), f"va_correlation_{subject}.csv")
        names = fit.covariate_names
        run.csv(pd.DataFrame([{"equation": eq, "name": n, "coef": c}
                              for eq in ("blind", "teacher") for n, c in zip(names[eq], fit.coef[eq])]),
                f"coefficients_{subject}.csv")
        summary[subject] = {"teachers": len(g), "omitted": g.attrs.get("omitted", 0),
                            "single_gender": g.attrs.get("single_gender", 0),
                            "residual_corr": fit.residual_corr, "dropped_columns": fit.dropped_columns,
                            "warnings": fit.warnings, "method": system}
    run.json(summary, "gaps_summary.json")


def _read_gaps(inp: Path, subject: str | None) -> pd.DataFrame:
    path = inp / "gaps.csv" if inp.is_dir() else inp
    if not path.exists():
        raise ConfigError(f"no gaps.csv under {inp}")
    gaps = read_csv(path, dtype={"teacher_id": str, "years": str})
    if subject:
        gaps = gaps[gaps["subject"] == subject].reset_index(drop=True)
    if gaps.empty:
        raise ConfigError("gap table is empty")
    return gaps


def cmd_hetero(args, cfg, run: Run):
    doc = cfg.get("hetero", {})
    gaps = _read_gaps(_require_input(args), args.subject)
    decs = {s: variance_decomposition(g) for s, g in gaps.groupby("subject", sort=True)}
    run.csv(pd.DataFrame([d.to_dict() for d in decs.values()]).assign(
        floored=lambda f: f["floored"].map(";".join)), "variance.csv")
    run.csv(cross_subject_report(gaps), "cross_subject.csv")
    panel_dir = doc.get("panel")
    if panel_dir:
        teachers, _ = load_table(Path(panel_dir) / "teachers.csv", "teachers")
        covs = list(doc.get("covariates", DEFAULT_TEACHER_COVARIATES))
        for subject, g in gaps.groupby("subject", sort=True):
            res = characteristics_regression(g, teachers, covs, sd=decs[subject],
                                             weighting=doc.get("weighting", "inverse_variance"))
            _write_regression(run, f"hetero_characteristics_{subject}", res.regression,
                              {"outcome": "theta_hat / sd", "fixed_effects": res.fixed_effects,
                               "weighting": res.weighting, "n_unmatched": res.n_unmatched})
    iat_path = doc.get("iat")
    if iat_path:
        scores = read_csv(iat_path, dtype={"respondent_id": str})
        raw = read_csv(Path(panel_dir) / "teachers.csv", dtype={"teacher_id": str}) if panel_dir else None
        if raw is None or "school_location" not in raw:
            raise ConfigError("the IAT regression needs hetero.panel with a school_location column")
        frame = scores.rename(columns={"respondent_id": "teacher_id"})
        frame = frame.merge(raw[["teacher_id", "school_location"]].drop_duplicates("teacher_id"), on="teacher_id")
        for subject, g in gaps.groupby("subject", sort=True):
            res = iat_relation_regression(g, frame.dropna(subset=["iat_std"]), sd=decs[subject])
            _write_regression(run, f"hetero_iat_{subject}", res.regression,
                              {"outcome": "theta_hat / sd", "fixed_effects": res.fixed_effects,
                               "n_unmatched": res.n_unmatched})


def _eb_method(args, doc) -> str:
    return args.method or doc.get("method", "gaussian")


def _eb_grid(doc):
    g = doc.get("grid")
    return eb.default_grid(*g) if g else None


def cmd_eb(args, cfg, run: Run):
    doc = cfg.get("eb", {})
    gaps = _read_gaps(_require_input(args), args.subject)
    method = _eb_method(args, doc)
    calibrate = getattr(args, "calibrate", False) or bool(doc.get("calibrate", False))
    run.config.update({"eb_method": method, "calibrate": calibrate})
    grid, p = _eb_grid(doc), int(doc.get("p", 5))
    penalties = eb.penalty_grid(*doc["penalties"]) if "penalties" in doc else None
    subjects = sorted(gaps["subject"].unique())

    def one(subject):
        g = gaps[gaps["subject"] == subject].reset_index(drop=True)
        dec = variance_decomposition(g)
        if method == "gaussian":
            prior = eb.fit_gaussian_prior(dec)
            return subject, eb.shrink(g, prior), {"kind": "gaussian", "mu": prior.mu, "phi2": prior.phi2}, None, None
        if calibrate:
            cal = eb.calibrate_penalty(g, dec, grid=grid, p=p, penalties=penalties, with_se=True)
            prior, trace = cal.prior, cal.trace
        else:
            prior = eb.deconvolve(g, float(doc.get("c0", 1.0)), grid, p=p, with_se=True)
            trace = None
        info = {"kind": "deconvolved", "c0": prior.c0, "p": p, "converged": prior.converged,
                "iterations": prior.iterations, "mean": prior.mean(), "variance": prior.variance(),
                "target_mean": dec.unadjusted_mean, "target_variance": dec.var_weighted,
                "modes": eb.local_modes(prior)}
        return subject, eb.posterior_mean_deconv(g, prior), info, prior.density_frame(), trace

    results = _pmap(one, subjects, args.threads)
    run.csv(pd.concat([r[1] for r in results], ignore_index=True), "posterior.csv")
    for subject, _, info, density, trace in results:
        run.json(info, f"prior_{subject}.json")
        if density is not None:
            run.csv(density, f"density_{subject}.csv")
        if trace is not None:
            run.csv(trace, f"calibration_{subject}.csv")


def cmd_iat_score(args, cfg, run: Run):
    doc = cfg.get("iat", {})
    inp = _require_input(args)
    path = inp / "iat_trials.csv" if inp.is_dir() else inp
    if not path.exists():
        raise ConfigError(f"no IAT trial log at {path}")
    trials = read_csv(path, dtype={"respondent_id": str, "block": str})
    missing = {"respondent_id", "block", "latency_ms", "correct"} - set(trials.columns)
    if missing:
        raise ConfigError(f"IAT log lacks columns {sorted(missing)}")
    config = iat.ScoringConfig(**{k: doc[k] for k in iat.ScoringConfig.__dataclass_fields__ if k in doc})
    scores = iat.score_all(trials, config)
    usable = scores["d_score"].notna().sum()
    scores["iat_std"] = iat.standardize_iat(scores) if usable >= 2 else np.nan
    run.csv(scores, "iat_scores.csv")


def _outcomes(inp: Path, doc) -> pd.DataFrame:
    path = Path(doc.get("outcomes_file", inp / "outcomes.csv"))
    if not path.exists():
        raise ConfigError(f"no outcome table at {path}")
    out = read_csv(path, dtype={"student_id": str, "teacher_id": str})
    return out.drop(columns=[c for c in ("teacher_id", "theta_std_true") if c in out])


def cmd_effects(args, cfg, run: Run):
    doc = cfg.get("effects", {})
    inp = _require_input(args)
    panel, obs = _observations(inp, args.schema, args.subject)
    method = args.method or doc.get("method", "gaussian")
    cohorts = sorted(int(c) for c in panel.students["cohort_projected_grad"].dropna().unique())
    exclusions = doc.get("exclusions")
    if exclusions is not None:
        exclusions = {int(k): v for k, v in exclusions.items()}
    loo = effects.leave_one_year_out(obs, cohorts=cohorts, exclusions=exclusions,
                                     spec=_covariate_spec(cfg.get("gaps", {})), method=method)
    run.config.update({"eb_method": method, "cohorts": cohorts})
    run.csv(loo.estimates, "treatments.csv")
    run.csv(loo.missing, "treatments_missing.csv")
    links = attach_students(panel.scores, panel.students,
                            columns=("female", "school_id", "grade", "cohort_projected_grad"))
    if args.subject:
        links = links[links["subject"] == args.subject]
    rows = effects.build_exposure_rows(links, loo)
    outcomes = _outcomes(inp, doc)
    rows = rows.merge(outcomes, on="student_id", how="inner", suffixes=("", "_outcome"))
    names = doc.get("outcomes") or [c for c in outcomes.columns if c != "student_id"]
    if not names:
        raise ConfigError("no outcome columns selected")
    fe = tuple(doc.get("fe", effects.DEFAULT_FE))
    clusters = tuple(doc.get("clusters", effects.DEFAULT_CLUSTERS))
    for name in names:
        if name not in rows:
            raise ConfigError(f"outcome {name!r} not found")
        res = effects.estimate_effects(rows.assign(**{name: rows[name].astype(np.float64)}), name,
                                       fe=fe, clusters=clusters)
        lo, hi = res.ci()
        _write_regression(run, f"effects_{name}", res.regression, {
            "outcome": name, "treatment": res.treatment, "ybar_female": res.ybar_female,
            "ybar_male": res.ybar_male, "fixed_effects": res.fixed_effects, "clusters": res.clusters,
            "ci95_interaction": [lo, hi], "excluded_rows": rows.attrs.get("excluded", 0),
            "notices": res.notices, "flags": loo.flags,
        })


def _write_regression(run: Run, stem: str, reg, meta: dict):
    table = reg.table()
    run.csv(table, f"{stem}.csv")
    doc = dict(meta)
    doc.update({
        "n": reg.nobs, "r2": reg.r2, "df_resid": reg.df_resid, "n_clusters": reg.n_clusters,
        "coefficients": [{"name": r["name"], "estimate": r["estimate"], "se": r["se"], "dropped": bool(r["dropped"])}
                         for r in table.to_dict("records")],
    })
    run.json(doc, f"{stem}.json")


def _fmt(x, digits=4) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else f"{x:.{digits}f}"


def render_report(doc: dict) -> str:
    """Text table: coefficient, SE in parentheses, then Ybar and N rows."""
    lines = [f"Outcome: {doc.get('outcome', '')}", ""]
    width = max([len(c["name"]) for c in doc["coefficients"]] + [18])
    for c in doc["coefficients"]:
        if c["dropped"]:
            continue
        lines.append(f"{c['name']:<{width}}  {_fmt(c['estimate']):>10}")
        lines.append(f"{'':<{width}}  {'(' + _fmt(c['se']) + ')':>10}")
    lines.append("")
    if "ybar_female" in doc:
        lines.append(f"{'Ybar (female)':<{width}}  {_fmt(doc['ybar_female']):>10}")
        lines.append(f"{'Ybar (male)':<{width}}  {_fmt(doc['ybar_male']):>10}")
    lines.append(f"{'Observations':<{width}}  {doc['n']:>10}")
    lines.append(f"{'R-squared':<{width}}  {_fmt(doc['r2']):>10}")
    if doc.get("fixed_effects"):
        lines.append(f"{'Fixed effects':<{width}}  {', '.join(doc['fixed_effects'])}")
    if doc.get("clusters"):
        lines.append(f"{'Clusters':<{width}}  {', '.join(doc['clusters'])}")
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg, run: Run):
    inp = _require_input(args)
    docs = sorted(p for p in inp.rglob("*.json")
                  if p.name != MANIFEST and p.stem.startswith(("effects_", "hetero_")))
    if not docs:
        raise ConfigError(f"no regression results under {inp}")
    index = []
    for p in docs:
        doc = json.loads(p.read_text())
        text = render_report(doc)
        out = run.out / f"report_{p.stem}.txt"
        out.write_text(text)
        run.outputs.append(out)
        run.json({"source": p.relative_to(inp).as_posix(), **doc}, f"report_{p.stem}.json")
        index.append(p.stem)
    run.json({"reports": index}, "report_index.json")


HANDLERS = {
    "simulate": cmd_simulate, "gaps": cmd_gaps, "hetero": cmd_hetero, "eb": cmd_eb,
    "iat-score": cmd_iat_score, "effects": cmd_effects, "report": cmd_report,
}


def _error_report(kind: str, exc: BaseException, out: Path | None) -> dict:
    doc = {"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc)}
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(doc, out / "error.json")
        except OSError:
            pass
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return doc


def run(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(json.dumps({"status": "error", "kind": "usage", "message": str(exc).splitlines()[-1]}), file=sys.stderr)
        return 1
    r = None
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        config = {"command": args.command, "subject": args.subject, "method": args.method,
                  "threads": args.threads, "seed": args.seed, "file": cfg}
        r = Run(args.command, config, args.out, input_digests(args.inp, args.config, args.schema))
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](args, cfg, r)
        r.manifest()
        return 0
    except (GradeGapError, ValueError, OSError, yaml.YAMLError) as exc:
        doc = _error_report("validation", exc, args.out)
        if r is not None:
            r.manifest("error", doc)
        return 1
    except Exception as exc:  # noqa: BLE001
        doc = _error_report("internal", exc, args.out)
        doc["traceback"] = traceback.format_exc()
        if r is not None:
            r.manifest("error", doc)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
