"""IAT latency-log scoring (improved D algorithm), categories and standardization."""
from __future__ import annotations

import bisect
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .errors import UnscorableError

BLOCKS = ("practice_compatible", "test_compatible", "practice_incompatible", "test_incompatible")
CATEGORIES = ("preference_for_girls", "little_to_none", "slight", "moderate_to_severe", "strong")
BREAKS = (-0.15, 0.15, 0.35, 0.65)


@dataclass(frozen=True)
class ScoringConfig:
    slow_ms: float = 10_000.0
    fast_ms: float = 300.0
    fast_share: float = 0.10
    error_penalty_ms: float = 600.0
    min_trials: int = 10
    pairs: str = "practice+test"   # or "test"
    clamp: float = 2.0


@dataclass
class IatScore:
    respondent_id: object
    d_score: float
    category: str | None
    n_trials_used: int
    discarded_reason: str | None = None
    clamped: bool = False
    pairs_used: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def classify(d: float) -> str:
    """Severity category; intervals are closed on the left."""
    if not np.isfinite(d):
        raise ValueError("D-score must be finite")
    return CATEGORIES[bisect.bisect_right(BREAKS, d)]


def _fsum_mean(x: np.ndarray) -> float:
    # sorted accumulation makes the result independent of trial order
    return float(np.sum(np.sort(x))) / len(x)


def _pop_sd(x: np.ndarray) -> float:
    x = np.sort(x)
    m = _fsum_mean(x)
    return float(np.sqrt(np.sum(np.sort((x - m) ** 2)) / len(x)))


def _penalized_latencies(block: pd.DataFrame, penalty: float, label: str) -> np.ndarray:
    lat = block["latency_ms"].to_numpy(np.float64)
    ok = block["correct"].to_numpy(bool)
    if not ok.any():
        raise UnscorableError(f"block {label} has no correct trials")
    out = lat.copy()
    out[~ok] = _fsum_mean(lat[ok]) + penalty
    return out


def _pair_d(comp: np.ndarray, incomp: np.ndarray, label: str) -> float:
    sd = _pop_sd(np.concatenate([comp, incomp]))
    if not sd > 0:
        raise UnscorableError(f"{label} pair has zero latency variance")
    return (_fsum_mean(incomp) - _fsum_mean(comp)) / sd


def score_iat(trials: pd.DataFrame, config: ScoringConfig | None = None) -> IatScore:
    """Score one respondent's trial log.

    Trials slower than ``slow_ms`` are dropped; a respondent with more than
    ``fast_share`` of the remaining trials under ``fast_ms`` is discarded
    (returned with ``discarded_reason='fast-responder'``). Error latencies
    are replaced by the block's mean correct latency plus the penalty. Each
    block pair contributes (mean incompatible - mean compatible) over the
    population SD of all its trials; D averages the pairs.

    Raises:
        UnscorableError: a test block is missing or too short, or only one
            of the two practice blocks is present.
    """
    cfg = config or ScoringConfig()
    rid = trials["respondent_id"].iloc[0] if len(trials) else None
    t = trials[trials["latency_ms"] <= cfg.slow_ms]
    if len(t) and (t["latency_ms"] < cfg.fast_ms).mean() > cfg.fast_share:
        return IatScore(rid, float("nan"), None, 0, "fast-responder")
    blocks = {b: t[t["block"] == b] for b in BLOCKS}
    for b in ("test_compatible", "test_incompatible"):
        if len(blocks[b]) < cfg.min_trials:
            raise UnscorableError(f"respondent {rid}: block {b} has {len(blocks[b])} trials (< {cfg.min_trials})")
    pairs = [("test", "test_compatible", "test_incompatible")]
    if cfg.pairs == "practice+test":
        present = [len(blocks[b]) > 0 for b in ("practice_compatible", "practice_incompatible")]
        if all(present):
            for b in ("practice_compatible", "practice_incompatible"):
                if len(blocks[b]) < cfg.min_trials:
                    raise UnscorableError(f"respondent {rid}: block {b} has {len(blocks[b])} trials (< {cfg.min_trials})")
            pairs.insert(0, ("practice", "practice_compatible", "practice_incompatible"))
        elif any(present):
            raise UnscorableError(f"respondent {rid}: only one practice block present")
    elif cfg.pairs != "test":
        raise ValueError(f"unknown pairs option {cfg.pairs!r}")
    ds, n_used = [], 0
    for label, bc, bi in pairs:
        comp = _penalized_latencies(blocks[bc], cfg.error_penalty_ms, bc)
        incomp = _penalized_latencies(blocks[bi], cfg.error_penalty_ms, bi)
        ds.append(_pair_d(comp, incomp, label))
        n_used += len(comp) + len(incomp)
    d = float(np.mean(ds))
    clamped = abs(d) > cfg.clamp
    d = float(np.clip(d, -cfg.clamp, cfg.clamp))
    used = "+".join(p[0] for p in pairs)
    return IatScore(rid, d, classify(d), n_used, None, clamped, used)


def score_all(trials: pd.DataFrame, config: ScoringConfig | None = None) -> pd.DataFrame:
    """Score every respondent; unscorable logs are reported, not dropped.

    Returns one row per respondent (sorted by id) with ``d_score``,
    ``category``, ``n_trials_used``, ``discarded_reason``, ``clamped`` and
    ``pairs_used``.
    """
    rows = []
    for rid, grp in trials.groupby("respondent_id", sort=True):
        try:
            rows.append(score_iat(grp, config).to_dict())
        except UnscorableError as exc:
            rows.append(IatScore(rid, float("nan"), None, 0, f"unscorable: {exc}").to_dict())
    cols = list(IatScore.__dataclass_fields__)
    return pd.DataFrame(rows, columns=cols)


def standardize_iat(scores: pd.DataFrame, column: str = "d_score") -> pd.Series:
    """Z-scores (population SD) over non-discarded respondents; NaN elsewhere.

    Raises:
        ValueError: fewer than two usable scores or zero variance.
    """
    x = scores[column].astype("float64")
    valid = x.notna()
    if "discarded_reason" in scores:
        valid &= scores["discarded_reason"].isna()
    v = x[valid].to_numpy()
    if len(v) < 2:
        raise ValueError("standardization needs at least 2 scored respondents")
    sd = v.std()
    if not sd > 0:
        raise ValueError("IAT scores have zero variance")
    return ((x - v.mean()) / sd).where(valid)
