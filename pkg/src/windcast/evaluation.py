"""Scoring and diagnostics for probabilistic power forecasts.

Everything here consumes forecast CDFs (or their CSV serialisation) plus
settlement records and produces the flat tables the reporting stage writes:
mean CRPS per method and horizon, pairwise skill with block-bootstrap
significance, reliability coverage, and the NWP / weather-to-power
uncertainty decomposition with its crossing analysis.

Scores are computed against normalized settlement energy; curtailed
records must be filtered out by the caller before matching (the stages in
:mod:`windcast.cli` do this), so a record that matches here is always a
valid observation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ParameterError,
    PowerRecord,
    UncertaintyProfile,
    derive_seed,
    match_settlement,
    normalize_power,
)
from .dists import (
    CRPS_GRID,
    BoundedCdf,
    InterpolatedCdf,
    StepCdf,
    cdf_quantile,
    crps_numeric,
)

__all__ = [
    "ScoredPair",
    "BootstrapSkill",
    "EvaluationReport",
    "mean_crps",
    "pinball_loss",
    "skill_score",
    "bootstrap_significance",
    "reliability_table",
    "uncertainty_nwp",
    "uncertainty_w2p",
    "uncertainty_profiles",
    "crossing_horizon",
    "high_uncertainty_filter",
    "horizon_day",
    "score_runs",
    "cdf_from_quantile_row",
    "read_forecast_csv",
    "write_table",
    "CRPS_HEADER",
    "SKILL_HEADER",
    "RELIABILITY_HEADER",
    "UNCERTAINTY_HEADER",
    "CROSSING_HEADER",
]

_TAG_BOOTSTRAP = 0xB05

CRPS_HEADER = ("method", "farm", "horizon_h", "mean_crps", "n")
SKILL_HEADER = ("subject", "reference", "farm", "day", "skill", "significant")
RELIABILITY_HEADER = ("method", "farm", "tau", "coverage", "n")
UNCERTAINTY_HEADER = ("farm", "horizon_h", "u_nwp", "u_w2p")
CROSSING_HEADER = ("farm", "crossing_h")


# ---------------------------------------------------------------------------
# elementary scores
# ---------------------------------------------------------------------------

def mean_crps(
    forecasts: Sequence[BoundedCdf],
    observations: Sequence[float],
    n_grid: int = CRPS_GRID,
) -> float:
    """Arithmetic mean CRPS over aligned forecast/observation pairs."""
    if len(forecasts) != len(observations):
        raise ParameterError(
            f"{len(forecasts)} forecasts vs {len(observations)} observations"
        )
    if not forecasts:
        raise ParameterError("mean CRPS of an empty pair set is undefined")
    return float(
        np.mean([crps_numeric(F, y, n_grid) for F, y in zip(forecasts, observations)])
    )


def pinball_loss(q, y, tau: float):
    """Quantile (pinball) loss; the τ-quantile is its minimizer."""
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"tau must be inside (0, 1), got {tau}")
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = y - q
    out = np.where(diff >= 0.0, tau * diff, (tau - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def skill_score(a_ref: float, a_subject: float) -> float:
    """Relative improvement over a reference score; perfect CRPS is zero.

    Positive iff the subject scores strictly better than the reference.
    """
    if a_ref <= 0.0:
        raise ParameterError(
            f"skill against a reference score of {a_ref} is undefined"
        )
    return (a_ref - a_subject) / a_ref


def horizon_day(horizon_hours: int) -> int:
    """Group a positive lead time into whole days ahead (1..24 h -> day 0)."""
    if horizon_hours < 1:
        raise ParameterError(
            f"day grouping needs a positive horizon, got {horizon_hours}"
        )
    return (horizon_hours - 1) // 24


# ---------------------------------------------------------------------------
# matched scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredPair:
    """CRPS of one forecast against its matched settlement observation."""

    base_time: datetime
    horizon_hours: int
    crps: float


def score_runs(runs, records: Sequence[PowerRecord], n_grid: int = CRPS_GRID):
    """Score forecast runs against settlement records by valid time.

    Runs without a matching record are dropped silently: partial overlap is
    normal when settlement data ends before the last forecast valid time.
    Pass curtailment-filtered records; matching does not re-check BAV.
    """
    times = [run.index.valid_time for run in runs]
    idx = match_settlement(records, times)
    pairs = []
    for run, i in zip(runs, idx):
        if i < 0:
            continue
        y = normalize_power(records[i])
        pairs.append(
            ScoredPair(
                base_time=run.index.base_time,
                horizon_hours=run.index.horizon_hours,
                crps=crps_numeric(run.output, y, n_grid),
            )
        )
    return tuple(pairs)


# ---------------------------------------------------------------------------
# skill with block-bootstrap significance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapSkill:
    """Skill estimate with a central bootstrap interval.

    ``significant`` is true iff the central 95% interval of resampled
    skills excludes zero.  ``insufficient`` flags a pair set too small for
    the interval to mean anything; such results are never significant.
    """

    skill: float
    lower: float
    upper: float
    significant: bool
    n_pairs: int
    n_blocks: int
    insufficient: bool = False


def bootstrap_significance(
    subject: Sequence[float],
    reference: Sequence[float],
    block_keys: Sequence,
    *,
    n_resamples: int = 1000,
    seed: int = 0,
    min_pairs: int = 30,
) -> BootstrapSkill:
    """Skill of subject vs reference with base-time block resampling.

    Scores must be paired per timestamp; ``block_keys[i]`` names the block
    of pair ``i`` (one forecast issue, all its horizons), which preserves
    the within-issue dependence that independent resampling would destroy.
    """
    s = np.asarray(subject, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    keys = np.asarray(block_keys)
    if s.shape != r.shape or s.ndim != 1 or s.shape != keys.shape:
        raise ParameterError("subject, reference, and block keys must align 1:1")
    if len(s) == 0:
        raise ParameterError("no score pairs to resample")
    if n_resamples < 1:
        raise ParameterError(f"need at least one resample, got {n_resamples}")

    estimate = skill_score(float(r.mean()), float(s.mean()))
    uniq, inv = np.unique(keys, return_inverse=True)
    n_blocks = len(uniq)
    if len(s) < min_pairs or n_blocks < 2:
        return BootstrapSkill(
            skill=estimate,
            lower=float("nan"),
            upper=float("nan"),
            significant=False,
            n_pairs=len(s),
            n_blocks=n_blocks,
            insufficient=True,
        )

    sums_s = np.bincount(inv, weights=s, minlength=n_blocks)
    sums_r = np.bincount(inv, weights=r, minlength=n_blocks)
    counts = np.bincount(inv, minlength=n_blocks).astype(np.float64)

    rng = np.random.default_rng(derive_seed(seed, _TAG_BOOTSTRAP))
    take = rng.integers(0, n_blocks, size=(n_resamples, n_blocks))
    tot_s = sums_s[take].sum(axis=1)
    tot_r = sums_r[take].sum(axis=1)
    tot_n = counts[take].sum(axis=1)
    mean_s = tot_s / tot_n
    mean_r = tot_r / tot_n
    # CRPS is nonnegative, so a zero reference mean needs every resampled
    # block to be perfect; score that resample as no-skill.
    skills = np.where(mean_r > 0.0, 1.0 - mean_s / np.where(mean_r > 0, mean_r, 1.0), 0.0)
    lower, upper = np.percentile(skills, [2.5, 97.5])
    significant = bool(lower > 0.0 or upper < 0.0)
    return BootstrapSkill(
        skill=estimate,
        lower=float(lower),
        upper=float(upper),
        significant=significant,
        n_pairs=len(s),
        n_blocks=n_blocks,
    )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def reliability_table(
    forecasts: Sequence[BoundedCdf],
    observations: Sequence[float],
    taus: Sequence[float],
) -> np.ndarray:
    """Empirical coverage of each nominal level; calibrated means coverage=τ.

    Coverage at τ is the fraction of observations at or below the predicted
    τ-quantile, which is exactly nondecreasing in τ.
    """
    if len(forecasts) != len(observations):
        raise ParameterError(
            f"{len(forecasts)} forecasts vs {len(observations)} observations"
        )
    if not forecasts:
        raise ParameterError("reliability of an empty pair set is undefined")
    taus = np.asarray(taus, dtype=np.float64)
    if taus.ndim != 1 or len(taus) == 0 or np.any((taus <= 0) | (taus >= 1)):
        raise ParameterError("tau grid must be a nonempty vector inside (0, 1)")
    y = np.asarray(observations, dtype=np.float64)
    cover = np.zeros(len(taus))
    for F, yi in zip(forecasts, y):
        cover += yi <= np.asarray(cdf_quantile(F, taus))
    return cover / len(forecasts)


# ---------------------------------------------------------------------------
# uncertainty decomposition
# ---------------------------------------------------------------------------

def uncertainty_nwp(member_medians) -> float:
    """Spread of the ensemble in power terms: IQR across member medians.

    Uses the linear-interpolation empirical quantile (numpy's default), so
    five members at 0, 0.2, 0.4, 0.6, 0.8 give exactly 0.4.
    """
    x = np.asarray(member_medians, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ParameterError("NWP uncertainty needs at least two member medians")
    q25, q75 = np.percentile(x, [25.0, 75.0])
    return float(q75 - q25)


def uncertainty_w2p(q25s, q75s) -> float:
    """Conversion uncertainty: mean member interquartile width."""
    lo = np.asarray(q25s, dtype=np.float64)
    hi = np.asarray(q75s, dtype=np.float64)
    if lo.shape != hi.shape or lo.ndim != 1 or len(lo) == 0:
        raise ParameterError("member quartiles must be equal-length nonempty vectors")
    if np.any(hi < lo):
        raise ParameterError("upper quartiles must not sit below lower quartiles")
    return float(np.mean(hi - lo))


def uncertainty_profiles(member_curves, levels) -> tuple[UncertaintyProfile, ...]:
    """Decompose forecast uncertainty per horizon, averaged over base times.

    ``member_curves`` maps horizon to ``(base_times, curves)`` with curves
    of shape (bases, members, levels), as the pipeline's member quantile
    export produces; ``levels`` is the tau grid of those curves and must
    contain 0.25, 0.5 and 0.75.  Horizons without any base time are absent
    from the result.
    """
    lv = np.asarray(levels, dtype=np.float64)
    idx = [np.flatnonzero(np.isclose(lv, q)) for q in (0.25, 0.5, 0.75)]
    if any(len(i) == 0 for i in idx):
        raise ParameterError("curves must include the 0.25, 0.5 and 0.75 levels")
    i25, i50, i75 = (int(i[0]) for i in idx)
    profiles = []
    for h in sorted(member_curves):
        _, pred = member_curves[h]
        if len(pred) == 0:
            continue
        u_nwp = float(np.mean([uncertainty_nwp(day[:, i50]) for day in pred]))
        u_w2p = float(np.mean([uncertainty_w2p(day[:, i25], day[:, i75]) for day in pred]))
        profiles.append(UncertaintyProfile(int(h), u_nwp, u_w2p))
    return tuple(profiles)


def crossing_horizon(profiles: Sequence[UncertaintyProfile]) -> float | None:
    """Lead time where NWP uncertainty overtakes conversion uncertainty.

    Fits a straight line to the difference profile and returns its root,
    or None when the fitted difference never crosses inside the horizon
    range (including the degenerate flat-difference case).
    """
    if len(profiles) < 2:
        raise ParameterError("need profiles for at least two horizons")
    h = np.array([p.horizon_hours for p in profiles], dtype=np.float64)
    d = np.array([p.u_nwp - p.u_w2p for p in profiles], dtype=np.float64)
    if len(np.unique(h)) < 2:
        raise ParameterError("profiles must span at least two distinct horizons")
    slope, intercept = np.polyfit(h, d, 1)
    if abs(slope) < 1e-12:
        return None
    root = -intercept / slope
    if h.min() <= root <= h.max():
        return float(root)
    return None


def high_uncertainty_filter(values, threshold: float) -> np.ndarray:
    """Mask of records whose NWP uncertainty strictly exceeds the threshold."""
    return np.asarray(values, dtype=np.float64) > float(threshold)


# ---------------------------------------------------------------------------
# forecast CSV round trip
# ---------------------------------------------------------------------------

def cdf_from_quantile_row(
    values, taus, omega0: float = 0.0, omega1: float = 0.0
) -> BoundedCdf:
    """Rebuild a bounded CDF from serialized quantiles plus boundary masses.

    The reconstruction pins the boundary knots (0, omega0) and (1, 1-omega1)
    and keeps only interior grid knots consistent with them; interior point
    masses survive through duplicate-value collapse.  Resolution is limited
    to the serialized grid, so this is for reporting and external scoring,
    not a bit-exact inverse.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    t = np.asarray(taus, dtype=np.float64)
    if v.shape != t.shape or v.ndim != 1 or len(v) == 0:
        raise ParameterError("quantile values and levels must align")
    if np.any(np.diff(t) <= 0) or t[0] <= 0.0 or t[-1] >= 1.0:
        raise ParameterError("tau grid must be strictly increasing inside (0, 1)")
    if not 0.0 <= omega0 <= 1.0 or not 0.0 <= omega1 <= 1.0 or omega0 + omega1 > 1.0:
        raise ParameterError(
            f"boundary masses ({omega0}, {omega1}) must be a sub-probability pair"
        )
    v = np.maximum.accumulate(v)

    eps = 1e-9
    if omega0 >= 1.0 - eps:
        return StepCdf(0.0)
    if omega1 >= 1.0 - eps:
        return StepCdf(1.0)
    if 1.0 - omega0 - omega1 < eps:
        # Mass split across both boundaries leaves no interior to
        # interpolate; the pipeline never serializes such a forecast.
        raise ParameterError(
            f"boundary masses ({omega0}, {omega1}) leave no interior mass"
        )
    keep = (v > 0.0) & (v < 1.0) & (t > omega0 + eps) & (t < 1.0 - omega1 - eps)
    vk, tk = v[keep], t[keep]
    # A run of grid levels sharing one value is a point mass there.  Its
    # first level bounds the CDF just below the value, so pin that left
    # limit with a knot a hair lower; otherwise the mass would smear down
    # to the previous knot.
    knot_v: list[float] = [0.0]
    knot_t: list[float] = [omega0]
    i = 0
    while i < len(vk):
        j = i
        while j + 1 < len(vk) and vk[j + 1] - vk[j] <= 1e-12:
            j += 1
        if j > i:
            delta = min(1e-9, 0.5 * (vk[i] - knot_v[-1]))
            knot_v.append(vk[i] - delta)
            knot_t.append(tk[i])
        knot_v.append(vk[j])
        knot_t.append(tk[j])
        i = j + 1
    knot_v.append(1.0)
    knot_t.append(1.0 - omega1)
    return InterpolatedCdf(knot_v, knot_t)


def read_forecast_csv(path) -> dict:
    """Load a forecast CSV into CDFs keyed by (method, farm, base, horizon).

    Inverse of the pipeline writer up to grid resolution; base times come
    back as ISO-8601 strings exactly as serialized so the evaluation stage
    can group without re-parsing timezones.
    """
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"method", "farm", "base_time", "horizon_h", "tau", "value"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ParameterError(f"{path} is not a forecast table")
        for row in reader:
            key = (row["method"], row["farm"], row["base_time"], int(row["horizon_h"]))
            entry = groups.setdefault(key, {"taus": [], "values": [], "omega": None})
            entry["taus"].append(float(row["tau"]))
            entry["values"].append(float(row["value"]))
            entry["omega"] = (float(row["omega0"]), float(row["omega1"]))
    out = {}
    for key, entry in groups.items():
        order = np.argsort(entry["taus"])
        taus = np.asarray(entry["taus"])[order]
        values = np.asarray(entry["values"])[order]
        out[key] = cdf_from_quantile_row(values, taus, *entry["omega"])
    return out


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    """Flat, plot-ready evaluation tables for one run.

    Row layouts match the *_HEADER constants; empty groups are simply
    absent rather than carried as zeros.
    """

    crps: tuple = ()
    skill: tuple = ()
    reliability: tuple = ()
    uncertainty: tuple = ()
    crossing: tuple = ()


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    """Write one report table; returns the number of data rows."""
    count = 0
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
            count += 1
    return count
