"""Model input assembly.

Two feature families: the 24-column weather-to-power set built from the four
grid points closest to the farm (ensemble-driven methods), and the
spatial/temporal set over a 5x5 domain around the farm (deterministic-NWP
method).  Both are pure array transforms; the recipes are data so variants
stay configuration, not code forks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import ParameterError, SchemaError
from .dataio import DeterministicCube, EnsembleCube

logger = logging.getLogger(__name__)

W2P_VARIABLES = ("u10", "v10", "t2")
_W2P_DERIVED = ("w10", "d10", "w10_cubed")


@dataclass(frozen=True)
class FeatureMatrix:
    """Named real-valued features indexed by forecast valid time.

    ``horizons``/``base_times`` are present when rows are keyed by forecast
    step rather than by unique valid time; ``dropped_rows`` counts rows the
    builder discarded (boundary effects, non-finite inputs).
    """

    times: tuple[datetime, ...]
    names: tuple[str, ...]
    values: np.ndarray
    horizons: np.ndarray | None = None
    base_times: tuple[datetime, ...] | None = None
    dropped_rows: int = 0

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ParameterError("feature values must be 2-d")
        if vals.shape != (len(self.times), len(self.names)):
            raise ParameterError(
                f"feature shape {vals.shape} does not match "
                f"{len(self.times)} times x {len(self.names)} names"
            )
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("features contain non-finite values")
        if any(b > a for a, b in zip(self.times[1:], self.times)):
            raise ParameterError("rows must be in chronological order")
        if self.horizons is not None:
            hz = np.asarray(self.horizons, dtype=np.int64)
            if hz.shape != (len(self.times),):
                raise ParameterError("horizons must align with rows")
            object.__setattr__(self, "horizons", hz)
        if self.base_times is not None and len(self.base_times) != len(self.times):
            raise ParameterError("base_times must align with rows")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.index = pd.DatetimeIndex(self.times, name="valid_time")
        return frame


def _w2p_block(u: np.ndarray, v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Stack the 24 weather-to-power columns from (..., 4) point arrays.

    Output column order is point-major: for each point rank, the direct
    variables then the derived ones, matching ``w2p_feature_names``.
    """
    w = np.hypot(u, v)
    d = np.arctan2(v, u)  # arctan2(0, 0) = 0: calm wind points east
    per_point = np.stack([u, v, t, w, d, w**3], axis=-1)  # (..., 4, 6)
    return per_point.reshape(*per_point.shape[:-2], 24)


def w2p_feature_names() -> tuple[str, ...]:
    return tuple(
        f"p{rank}_{var}"
        for rank in range(1, 5)
        for var in W2P_VARIABLES + _W2P_DERIVED
    )


def w2p_features(
    point_weather: Mapping[str, np.ndarray],
    valid_times: Sequence[datetime],
) -> FeatureMatrix:
    """Build the 24-column feature set from 4-point weather arrays.

    ``point_weather`` maps u10/v10/t2 to (n, 4) arrays whose columns are the
    grid points ranked by distance to the farm.
    """
    missing = [v for v in W2P_VARIABLES if v not in point_weather]
    if missing:
        raise SchemaError(f"missing weather variables: {missing}")
    arrays = []
    for var in W2P_VARIABLES:
        arr = np.asarray(point_weather[var], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise SchemaError(
                f"{var} must cover exactly the 4 closest grid points, got shape {arr.shape}"
            )
        if arr.shape[0] != len(valid_times):
            raise ParameterError(f"{var} rows do not match valid times")
        arrays.append(arr)
    u, v, t = arrays
    return FeatureMatrix(
        times=tuple(valid_times),
        names=w2p_feature_names(),
        values=_w2p_block(u, v, t),
    )


def ensemble_training_inputs(
    cube: EnsembleCube, lat: float, lon: float
) -> FeatureMatrix:
    """Training features from the ensemble median of analysis and +6 h fields.

    Rows from horizon 0 and horizon 6 are concatenated into one series keyed
    by valid time; if both horizons cover a valid time the analysis row wins.
    """
    for needed in (0, 6):
        if needed not in cube.horizons:
            raise ParameterError(
                f"training inputs need horizon {needed} in the ensemble archive"
            )
    idx4 = cube.grid.nearest_indices(lat, lon, 4)
    var_idx = [cube.var_index(v) for v in W2P_VARIABLES]

    rows: list[tuple[datetime, int, np.ndarray]] = []
    for horizon in (0, 6):
        ih = cube.horizons.index(horizon)
        med = np.median(cube.values[:, ih][:, :, idx4][:, :, :, var_idx], axis=1)
        block = _w2p_block(med[:, :, 0], med[:, :, 1], med[:, :, 2])
        for ib, base in enumerate(cube.base_times):
            rows.append((base + timedelta(hours=horizon), horizon, block[ib]))

    rows.sort(key=lambda r: (r[0], r[1]))
    kept: list[tuple[datetime, np.ndarray]] = []
    dropped = 0
    for when, _, feat in rows:
        if kept and kept[-1][0] == when:
            dropped += 1  # duplicate valid time: analysis row already kept
            continue
        if not np.all(np.isfinite(feat)):
            dropped += 1
            continue
        kept.append((when, feat))
    if dropped:
        logger.warning("ensemble training inputs: dropped %d rows", dropped)
    return FeatureMatrix(
        times=tuple(k[0] for k in kept),
        names=w2p_feature_names(),
        values=np.vstack([k[1] for k in kept]) if kept else np.empty((0, 24)),
        dropped_rows=dropped,
    )


def ensemble_member_inputs(
    cube: EnsembleCube, lat: float, lon: float, horizon: int
) -> tuple[tuple[datetime, ...], np.ndarray]:
    """Per-member prediction features at one horizon: (valid times, (B, M, 24))."""
    if horizon not in cube.horizons:
        raise ParameterError(f"horizon {horizon} not in the ensemble archive")
    ih = cube.horizons.index(horizon)
    idx4 = cube.grid.nearest_indices(lat, lon, 4)
    var_idx = [cube.var_index(v) for v in W2P_VARIABLES]
    sub = cube.values[:, ih][:, :, idx4][:, :, :, var_idx]  # (B, M, 4, 3)
    feats = _w2p_block(sub[..., 0], sub[..., 1], sub[..., 2])
    valid = tuple(b + timedelta(hours=horizon) for b in cube.base_times)
    return valid, feats


# ---------------------------------------------------------------------------
# deterministic-NWP features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HresFeatureRecipe:
    """Which levels, series granularity and lag set the builder uses."""

    levels: tuple[str, ...] = ("10", "100")
    series_step_hours: int = 1
    lag_steps: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        if not self.levels:
            raise ParameterError("need at least one vertical level")
        if self.series_step_hours < 1:
            raise ParameterError("series step must be >= 1 hour")
        if not self.lag_steps or any(k < 1 for k in self.lag_steps) or sorted(
            set(self.lag_steps)
        ) != list(self.lag_steps):
            raise ParameterError("lag steps must be strictly increasing positives")


HRES_RECIPE = HresFeatureRecipe()
HRESC_RECIPE = HresFeatureRecipe(levels=("10",), series_step_hours=6, lag_steps=(1,))


def hres_feature_names(recipe: HresFeatureRecipe) -> tuple[str, ...]:
    names: list[str] = []
    for level in recipe.levels:
        hours = [k * recipe.series_step_hours for k in recipe.lag_steps]
        names.extend(
            [
                f"l{level}_w_center",
                f"l{level}_d_center",
                f"l{level}_w_center_cubed",
                f"l{level}_w_mean",
                f"l{level}_w_sd",
                f"l{level}_w_min",
                f"l{level}_w_max",
                *[f"l{level}_w_lag{h}h" for h in hours],
                *[f"l{level}_w_lead{h}h" for h in hours],
                f"l{level}_w_sd_roll",
            ]
        )
    return tuple(names)


def hres_features(
    cube: DeterministicCube,
    lat: float,
    lon: float,
    recipe: HresFeatureRecipe = HRES_RECIPE,
) -> FeatureMatrix:
    """Spatial/temporal features over the 5x5 domain around the farm.

    Per level: center-point wind speed, direction and cubed speed; domain
    mean/sd/min/max of speed; lags and leads of the domain-mean speed on the
    recipe's series lattice; centered rolling sd of that series.  Horizons
    whose lags or leads fall outside the archive are dropped and counted.
    """
    window = cube.grid.window_indices(lat, lon, half=2)
    center = int(cube.grid.nearest_indices(lat, lon, 1)[0])
    center_pos = int(np.where(window == center)[0][0])

    step = recipe.series_step_hours
    lattice = [h for h in cube.horizons if h % step == 0]
    if len(lattice) < 2 * max(recipe.lag_steps) + 1:
        raise ParameterError(
            "archive horizons cannot support the requested lag set"
        )
    missing_steps = [
        h for h in range(min(lattice), max(lattice) + 1, step) if h not in lattice
    ]
    if missing_steps:
        raise ParameterError(f"series lattice has gaps at horizons {missing_steps}")
    h_index = {h: i for i, h in enumerate(lattice)}
    max_lag = max(recipe.lag_steps)

    level_blocks: list[np.ndarray] = []
    B = len(cube.base_times)
    for level in recipe.levels:
        try:
            ui = cube.var_index(f"u{level}")
            vi = cube.var_index(f"v{level}")
        except ParameterError:
            raise SchemaError(
                f"level {level} requires variables u{level}/v{level} in the archive"
            ) from None
        cols = [cube.horizons.index(h) for h in lattice]
        u = cube.values[:, cols][:, :, window, ui]
        v = cube.values[:, cols][:, :, window, vi]
        w = np.hypot(u, v)  # (B, H, 25)
        dmean = w.mean(axis=2)
        block = {
            "w_center": w[:, :, center_pos],
            "d_center": np.arctan2(v[:, :, center_pos], u[:, :, center_pos]),
            "w_center_cubed": w[:, :, center_pos] ** 3,
            "w_mean": dmean,
            "w_sd": w.std(axis=2),
            "w_min": w.min(axis=2),
            "w_max": w.max(axis=2),
        }
        parts = [block[k] for k in (
            "w_center", "d_center", "w_center_cubed", "w_mean", "w_sd", "w_min", "w_max"
        )]
        for k in recipe.lag_steps:
            parts.append(np.roll(dmean, k, axis=1))  # lag: value at h - k*step
        for k in recipe.lag_steps:
            parts.append(np.roll(dmean, -k, axis=1))  # lead: value at h + k*step
        roll_sd = np.full_like(dmean, np.nan)
        for j in range(max_lag, dmean.shape[1] - max_lag):
            roll_sd[:, j] = dmean[:, j - max_lag : j + max_lag + 1].std(axis=1)
        parts.append(roll_sd)
        level_blocks.append(np.stack(parts, axis=2))  # (B, H, n_cols)

    all_cols = np.concatenate(level_blocks, axis=2)
    eligible = list(range(max_lag, len(lattice) - max_lag))
    dropped = B * (len(lattice) - len(eligible))

    rows = []
    for ib, base in enumerate(cube.base_times):
        for j in eligible:
            h = lattice[j]
            rows.append((base + timedelta(hours=h), base, h, all_cols[ib, j]))
    rows.sort(key=lambda r: (r[0], r[1]))
    return FeatureMatrix(
        times=tuple(r[0] for r in rows),
        names=hres_feature_names(recipe),
        values=np.vstack([r[3] for r in rows]),
        horizons=np.array([r[2] for r in rows], dtype=np.int64),
        base_times=tuple(r[1] for r in rows),
        dropped_rows=dropped,
    )


__all__ = [
    "FeatureMatrix",
    "HRESC_RECIPE",
    "HRES_RECIPE",
    "HresFeatureRecipe",
    "ensemble_member_inputs",
    "ensemble_training_inputs",
    "hres_features",
    "w2p_feature_names",
    "w2p_features",
]
