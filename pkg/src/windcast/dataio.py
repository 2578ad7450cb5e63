"""Forecast/observation containers, CSV interchange, synthetic scenarios.

The synthetic generator stands in for an NWP archive plus settlement data at
desk scale.  Truth is a spatially correlated AR(1) weather field; forecast
centers drift from truth with horizon; ensemble members add exchangeable
perturbations whose marginal spread grows linearly with horizon; and a
per-base-time lognormal regime factor modulates both the center error and
the spread, so ensemble dispersion is informative about actual uncertainty.
Every stream is keyed off the config seed through counter-based generators,
making outputs bit-identical across runs and iteration orders.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.linalg import cholesky
from scipy.signal import lfilter
from scipy.special import expit

from .core import (
    ConfigError,
    ForecastIndex,
    FormatError,
    ParameterError,
    PowerRecord,
    ensure_utc,
)

EARTH_RADIUS_KM = 6371.0
ENSEMBLE_VARIABLES = ("u10", "v10", "t2")
DETERMINISTIC_VARIABLES = ("u10", "v10", "u100", "v100")

POWER_HEADER = ["timestamp", "energy_mwh", "bav_mwh", "capacity_mw"]
NWP_HEADER = ["base_time", "horizon_h", "member", "lat", "lon", "variable", "value"]
TS_FORMAT = "%Y-%m-%dT%H:%MZ"


def format_timestamp(ts: datetime) -> str:
    return ensure_utc(ts).strftime(TS_FORMAT)


def parse_timestamp(text: str) -> datetime:
    try:
        return datetime.strptime(text, TS_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise FormatError(f"bad timestamp {text!r}, expected YYYY-MM-DDTHH:MMZ") from exc


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; inputs in degrees, broadcasting."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


@dataclass(frozen=True)
class NwpGrid:
    """Ordered NWP grid points (row-major by latitude, then longitude)."""

    points: tuple[tuple[float, float], ...]
    resolution_deg: float

    def __post_init__(self) -> None:
        if not self.points:
            raise ParameterError("grid needs at least one point")
        if len(set(self.points)) != len(self.points):
            raise ParameterError("grid points must be unique")
        if list(self.points) != sorted(self.points):
            raise ParameterError("grid points must be row-major by (lat, lon)")

    @classmethod
    def regular(
        cls, lat0: float, lon0: float, n_lat: int, n_lon: int, resolution_deg: float
    ) -> "NwpGrid":
        if n_lat < 1 or n_lon < 1 or resolution_deg <= 0:
            raise ParameterError("grid shape and resolution must be positive")
        pts = tuple(
            (round(lat0 + i * resolution_deg, 6), round(lon0 + j * resolution_deg, 6))
            for i in range(n_lat)
            for j in range(n_lon)
        )
        return cls(points=pts, resolution_deg=resolution_deg)

    @property
    def lats(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def lons(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def __len__(self) -> int:
        return len(self.points)

    def nearest_indices(self, lat: float, lon: float, k: int) -> np.ndarray:
        """Indices of the k closest points, ties broken by (lat, lon)."""
        if not 1 <= k <= len(self.points):
            raise ParameterError(f"k must be in [1, {len(self.points)}], got {k}")
        dist = haversine_km(self.lats, self.lons, lat, lon)
        order = np.lexsort((self.lons, self.lats, np.round(dist, 9)))
        return order[:k]

    def lattice_shape(self) -> tuple[int, int]:
        """(n_lat, n_lon) if the points form a full lattice."""
        lats = sorted(set(p[0] for p in self.points))
        lons = sorted(set(p[1] for p in self.points))
        if len(lats) * len(lons) != len(self.points):
            raise ConfigError("grid points do not form a full lattice")
        return len(lats), len(lons)

    def window_indices(self, lat: float, lon: float, half: int = 2) -> np.ndarray:
        """Row-major indices of the (2*half+1)^2 block centered on the
        nearest grid point; fails if the block leaves the lattice."""
        n_lat, n_lon = self.lattice_shape()
        center = int(self.nearest_indices(lat, lon, 1)[0])
        ci, cj = divmod(center, n_lon)
        if not (half <= ci < n_lat - half and half <= cj < n_lon - half):
            raise ConfigError(
                f"{2 * half + 1}x{2 * half + 1} window around ({lat}, {lon}) "
                "does not fit inside the grid"
            )
        return np.array(
            [
                (ci + di) * n_lon + (cj + dj)
                for di in range(-half, half + 1)
                for dj in range(-half, half + 1)
            ]
        )


def _check_values(values: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != shape:
        raise ParameterError(f"{what} must have shape {shape}, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ParameterError(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True)
class EnsembleForecast:
    """One (base time, horizon) slice of the ensemble system.

    Members are exchangeable: any permutation is the same forecast.
    """

    index: ForecastIndex
    grid: NwpGrid
    variables: tuple[str, ...]
    values: np.ndarray  # (member, point, variable)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[0] < 2:
            raise ParameterError("ensemble needs >= 2 members in a 3-d tensor")
        _check_values(
            vals, (vals.shape[0], len(self.grid), len(self.variables)), "ensemble values"
        )
        object.__setattr__(self, "values", vals)

    @property
    def n_members(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class DeterministicForecast:
    """One (base time, horizon) slice of the deterministic system."""

    index: ForecastIndex
    grid: NwpGrid
    variables: tuple[str, ...]
    values: np.ndarray  # (point, variable)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        _check_values(vals, (len(self.grid), len(self.variables)), "deterministic values")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class EnsembleCube:
    """Dense ensemble archive; slices view one shared tensor."""

    grid: NwpGrid
    variables: tuple[str, ...]
    base_times: tuple[datetime, ...]
    horizons: tuple[int, ...]
    values: np.ndarray  # (base, horizon, member, point, variable)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        b, h = len(self.base_times), len(self.horizons)
        if vals.ndim != 5:
            raise ParameterError("ensemble cube must be 5-d")
        _check_values(
            vals,
            (b, h, vals.shape[2], len(self.grid), len(self.variables)),
            "ensemble cube",
        )
        object.__setattr__(self, "values", vals)

    @property
    def n_members(self) -> int:
        return int(self.values.shape[2])

    def var_index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise ParameterError(f"unknown variable {name!r}") from None

    def forecast(self, i_base: int, i_horizon: int) -> EnsembleForecast:
        return EnsembleForecast(
            index=ForecastIndex(self.base_times[i_base], self.horizons[i_horizon]),
            grid=self.grid,
            variables=self.variables,
            values=self.values[i_base, i_horizon],
        )

    def __iter__(self) -> Iterator[EnsembleForecast]:
        for i in range(len(self.base_times)):
            for j in range(len(self.horizons)):
                yield self.forecast(i, j)


@dataclass(frozen=True)
class DeterministicCube:
    """Dense deterministic archive; slices view one shared tensor."""

    grid: NwpGrid
    variables: tuple[str, ...]
    base_times: tuple[datetime, ...]
    horizons: tuple[int, ...]
    values: np.ndarray  # (base, horizon, point, variable)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        b, h = len(self.base_times), len(self.horizons)
        if vals.ndim != 4:
            raise ParameterError("deterministic cube must be 4-d")
        _check_values(vals, (b, h, len(self.grid), len(self.variables)), "deterministic cube")
        object.__setattr__(self, "values", vals)

    def var_index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise ParameterError(f"unknown variable {name!r}") from None

    def forecast(self, i_base: int, i_horizon: int) -> DeterministicForecast:
        return DeterministicForecast(
            index=ForecastIndex(self.base_times[i_base], self.horizons[i_horizon]),
            grid=self.grid,
            variables=self.variables,
            values=self.values[i_base, i_horizon],
        )

    def __iter__(self) -> Iterator[DeterministicForecast]:
        for i in range(len(self.base_times)):
            for j in range(len(self.horizons)):
                yield self.forecast(i, j)


@dataclass(frozen=True)
class TrueWeather:
    """Half-hourly true weather on the grid (ground truth for power)."""

    grid: NwpGrid
    variables: tuple[str, ...]
    times: tuple[datetime, ...]
    values: np.ndarray  # (time, point, variable)

    def var_index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise ParameterError(f"unknown variable {name!r}") from None


@dataclass(frozen=True)
class FarmSite:
    name: str
    lat: float
    lon: float
    capacity_mw: float

    def __post_init__(self) -> None:
        if self.capacity_mw <= 0:
            raise ParameterError(f"capacity must be positive, got {self.capacity_mw}")


@dataclass(frozen=True)
class PowerCurve:
    """Smooth logistic curve between cut-in and rated, zero past cut-out."""

    cut_in: float = 3.0
    rated: float = 12.0
    cut_out: float = 25.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.cut_in < self.rated < self.cut_out:
            raise ParameterError(
                f"need 0 <= cut_in < rated < cut_out, got "
                f"({self.cut_in}, {self.rated}, {self.cut_out})"
            )

    def __call__(self, wind: np.ndarray) -> np.ndarray:
        wind = np.asarray(wind, dtype=np.float64)
        mid = 0.5 * (self.cut_in + self.rated)
        steep = 2.0 * math.log(99.0) / (self.rated - self.cut_in)
        out = expit(steep * (wind - mid))
        return np.where(wind > self.cut_out, 0.0, out)


@dataclass(frozen=True)
class SyntheticWorldConfig:
    seed: int = 0
    n_members: int = 6
    grid_shape: tuple[int, int] = (7, 7)
    grid_origin: tuple[float, float] = (53.0, -3.5)
    resolution_deg: float = 0.25
    horizons: tuple[int, ...] = tuple(range(0, 54, 6))
    det_step_hours: int = 1
    start: datetime = datetime(2020, 1, 1, tzinfo=timezone.utc)
    n_days: int = 100
    base_hours: tuple[int, ...] = (0, 12)
    farms: tuple[FarmSite, ...] = (FarmSite("farm0", 53.75, -2.75, 60.0),)
    autocorr_hourly: float = 0.97
    spatial_length_km: float = 120.0
    mean_u: float = 5.0
    mean_v: float = 2.0
    sd_u: float = 3.0
    sd_v: float = 2.5
    dispersion0: float = 0.35
    dispersion_growth: float = 0.05
    center_error0: float = 0.3
    center_error_growth: float = 0.04
    regime_sigma: float = 0.5
    hub_factor: float = 1.15
    power_curve: PowerCurve = PowerCurve()
    noise_scale: float = 0.04
    noise_skew: float = 0.6
    curtail_rate: float = 0.01
    curtail_block: int = 8

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed > 2**64 - 1:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")
        if self.n_members < 2:
            raise ConfigError(f"need at least 2 members, got {self.n_members}")
        for name in (
            "dispersion0",
            "dispersion_growth",
            "center_error0",
            "center_error_growth",
            "regime_sigma",
            "noise_scale",
            "noise_skew",
            "curtail_rate",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 < self.autocorr_hourly < 1.0:
            raise ConfigError("autocorr_hourly must be in (0, 1)")
        if sorted(self.horizons) != list(self.horizons) or len(set(self.horizons)) != len(
            self.horizons
        ):
            raise ConfigError("horizons must be strictly increasing")
        if any(h < 0 for h in self.horizons):
            raise ConfigError("horizons must be nonnegative")
        if self.det_step_hours < 1:
            raise ConfigError("det_step_hours must be >= 1")
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if any(h not in (0, 12) for h in self.base_hours):
            raise ConfigError("base hours must be drawn from (0, 12)")
        if not self.farms:
            raise ConfigError("need at least one farm")
        if self.curtail_block < 1:
            raise ConfigError("curtail_block must be >= 1")
        if min(self.grid_shape) < 1 or self.resolution_deg <= 0:
            raise ConfigError("grid shape and resolution must be positive")
        grid = NwpGrid.regular(
            self.grid_origin[0],
            self.grid_origin[1],
            self.grid_shape[0],
            self.grid_shape[1],
            self.resolution_deg,
        )
        for farm in self.farms:
            try:
                grid.window_indices(farm.lat, farm.lon, half=2)
            except ConfigError:
                raise ConfigError(
                    f"farm {farm.name!r} at ({farm.lat}, {farm.lon}) needs a 5x5 "
                    "grid window around it; move it or enlarge the grid"
                ) from None


@dataclass(frozen=True)
class SyntheticWorld:
    truth: TrueWeather
    ensembles: EnsembleCube
    deterministic: DeterministicCube
    power: Mapping[str, tuple[PowerRecord, ...]]
    config: SyntheticWorldConfig


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *tags))))


def _stationary_ar(draws: np.ndarray, phi: float, axis: int = 0) -> np.ndarray:
    """Unit-variance AR(1) along ``axis`` driven by standard normal draws."""
    scale = math.sqrt(1.0 - phi * phi)
    out = lfilter([1.0], [1.0, -phi], scale * draws, axis=axis)
    # Fix the start at the stationary law instead of a zero-history ramp.
    first = np.take(draws, 0, axis=axis)
    correction = first - scale * first  # replaces the damped first sample
    shape = [1] * draws.ndim
    shape[axis] = draws.shape[axis]
    steps = np.arange(draws.shape[axis], dtype=np.float64).reshape(shape)
    return out + np.expand_dims(correction, axis) * phi**steps


def _spatial_chol(grid: NwpGrid, length_km: float) -> np.ndarray:
    d = haversine_km(
        grid.lats[:, None], grid.lons[:, None], grid.lats[None, :], grid.lons[None, :]
    )
    corr = np.exp(-d / max(length_km, 1e-9))
    corr[np.diag_indices_from(corr)] += 1e-9
    return cholesky(corr, lower=True)


def generate_synthetic(config: SyntheticWorldConfig) -> SyntheticWorld:
    """Build the full synthetic world for one seed.

    All randomness flows through counter-based streams tagged by component,
    so any sub-stream is independent of the order in which others are drawn.
    """
    grid = NwpGrid.regular(
        config.grid_origin[0],
        config.grid_origin[1],
        config.grid_shape[0],
        config.grid_shape[1],
        config.resolution_deg,
    )
    P = len(grid)
    L = _spatial_chol(grid, config.spatial_length_km)
    # The deterministic archive runs 6 h past the last ensemble horizon so
    # lead features stay defined there; truth extends past the last base time
    # so every horizon stays covered.
    max_h = max(config.horizons)
    det_max_h = max_h + 6
    n_steps = config.n_days * 48 + 2 * det_max_h
    times = tuple(config.start + timedelta(minutes=30 * i) for i in range(n_steps))
    phi30 = config.autocorr_hourly ** 0.5

    truth_vars = ("u10", "v10", "t2", "u100", "v100")
    base_mean = {"u10": config.mean_u, "v10": config.mean_v, "t2": 283.0}
    base_sd = {"u10": config.sd_u, "v10": config.sd_v, "t2": 6.0}

    latents = {}
    for vi, name in enumerate(("u10", "v10", "t2", "shear_u", "shear_v")):
        eps = _rng(config.seed, 1, vi).standard_normal((n_steps, P))
        latents[name] = _stationary_ar(eps @ L.T, phi30, axis=0)

    truth = np.empty((n_steps, P, len(truth_vars)))
    truth[:, :, 0] = base_mean["u10"] + base_sd["u10"] * latents["u10"]
    truth[:, :, 1] = base_mean["v10"] + base_sd["v10"] * latents["v10"]
    truth[:, :, 2] = base_mean["t2"] + base_sd["t2"] * latents["t2"]
    truth[:, :, 3] = 1.25 * truth[:, :, 0] + 0.8 * latents["shear_u"]
    truth[:, :, 4] = 1.25 * truth[:, :, 1] + 0.8 * latents["shear_v"]

    base_times = tuple(
        config.start + timedelta(days=d, hours=hh)
        for d in range(config.n_days)
        for hh in config.base_hours
    )
    B = len(base_times)
    det_horizons = tuple(range(0, det_max_h + 1, config.det_step_hours))
    H_det = len(det_horizons)
    start = config.start

    def truth_at(base: datetime, horizon_h: int) -> np.ndarray:
        step = int((base - start).total_seconds() // 1800) + 2 * horizon_h
        if not 0 <= step < n_steps:
            raise ConfigError(
                f"horizon {horizon_h}h from base {base} leaves the simulated period; "
                "increase n_days"
            )
        return truth[step]

    # Per-base lognormal regime factor: high-regime days have both larger
    # center error and wider ensembles, mean factor 1.
    zeta = _rng(config.seed, 3).standard_normal(B)
    regime = np.exp(config.regime_sigma * zeta - 0.5 * config.regime_sigma**2)

    # Center (common) error on the hourly horizon lattice, AR along horizon.
    psi1 = 0.85 ** (1.0 / 6.0)
    err_vars = ("u10", "v10", "t2", "u100", "v100")
    err_sd = {"u10": 1.0, "v10": 1.0, "t2": 0.6, "u100": 1.2, "v100": 1.2}
    hourly = np.arange(det_max_h + 1, dtype=np.float64)
    growth_hourly = config.center_error0 + config.center_error_growth * hourly
    center_err = np.empty((B, det_max_h + 1, P, len(err_vars)))
    for vi in range(len(err_vars)):
        eps = _rng(config.seed, 4, vi).standard_normal((B, det_max_h + 1, P))
        path = _stationary_ar(eps @ L.T, psi1, axis=1)
        center_err[:, :, :, vi] = (
            path
            * growth_hourly[None, :, None]
            * err_sd[err_vars[vi]]
            * regime[:, None, None]
        )

    # Ensemble values: truth + center error + member perturbations.
    Hh = len(config.horizons)
    M = config.n_members
    ens_values = np.empty((B, Hh, M, P, len(ENSEMBLE_VARIABLES)))
    psi6 = 0.85
    h_arr = np.array(config.horizons, dtype=np.float64)
    # Marginal member spread per (horizon, variable); t2 spreads less.
    spread_hv = (config.dispersion0 + config.dispersion_growth * h_arr)[:, None] * (
        np.array([1.0, 1.0, 0.6])[None, :]
    )
    for vi, name in enumerate(ENSEMBLE_VARIABLES):
        eps = _rng(config.seed, 5, vi).standard_normal((B, Hh, M, P))
        pert = _stationary_ar(eps @ L.T, psi6, axis=1)
        scale = spread_hv[:, vi][None, :] * regime[:, None]  # (B, H)
        for ib, base in enumerate(base_times):
            for ih, h in enumerate(config.horizons):
                t_slice = truth_at(base, h)[:, truth_vars.index(name)]
                common = center_err[ib, h, :, err_vars.index(name)]
                ens_values[ib, ih, :, :, vi] = (
                    t_slice[None, :] + common[None, :] + scale[ib, ih] * pert[ib, ih]
                )

    det_values = np.empty((B, H_det, P, len(DETERMINISTIC_VARIABLES)))
    for vi, name in enumerate(DETERMINISTIC_VARIABLES):
        for ib, base in enumerate(base_times):
            for ih, h in enumerate(det_horizons):
                det_values[ib, ih, :, vi] = (
                    truth_at(base, h)[:, truth_vars.index(name)]
                    + center_err[ib, h, :, err_vars.index(name)]
                )

    ens_cube = EnsembleCube(
        grid=grid,
        variables=ENSEMBLE_VARIABLES,
        base_times=base_times,
        horizons=config.horizons,
        values=ens_values,
    )
    det_cube = DeterministicCube(
        grid=grid,
        variables=DETERMINISTIC_VARIABLES,
        base_times=base_times,
        horizons=det_horizons,
        values=det_values,
    )

    power: dict[str, tuple[PowerRecord, ...]] = {}
    for fi, farm in enumerate(config.farms):
        nearest = int(grid.nearest_indices(farm.lat, farm.lon, 1)[0])
        u = truth[:, nearest, 0]
        v = truth[:, nearest, 1]
        wind = config.hub_factor * np.hypot(u, v)
        pc = config.power_curve(wind)
        noise_rng = _rng(config.seed, 6, fi)
        eps = _stationary_ar(noise_rng.standard_normal(n_steps), 0.9)
        # Conversion noise is skewed toward the far boundary: output near zero
        # can only spike upward, output near rated can only dip.  A quadratic
        # transform of the AR driver gives that shape with unchanged variance.
        gam = config.noise_skew * (1.0 - 2.0 * pc)
        eps = (eps + gam * (eps**2 - 1.0)) / np.sqrt(1.0 + 2.0 * gam**2)
        p_obs = np.clip(pc + config.noise_scale * 4.0 * pc * (1.0 - pc) * eps, 0.0, 1.0)
        energy = p_obs * farm.capacity_mw * 0.5

        bav = np.zeros(n_steps)
        curtail_rng = _rng(config.seed, 7, fi)
        n_blocks = min(
            n_steps, int(round(config.curtail_rate * n_steps / config.curtail_block))
        )
        if n_blocks > 0:
            starts = curtail_rng.choice(n_steps, size=n_blocks, replace=False)
            amounts = curtail_rng.uniform(0.02, 0.2, size=n_blocks)
            for s, amt in zip(starts, amounts):
                stop = min(n_steps, s + config.curtail_block)
                bav[s:stop] = amt * farm.capacity_mw * 0.5

        power[farm.name] = tuple(
            PowerRecord(
                timestamp=times[i],
                energy_mwh=float(energy[i]),
                bav_mwh=float(bav[i]),
                capacity_mw=farm.capacity_mw,
            )
            for i in range(n_steps)
        )

    truth_series = TrueWeather(
        grid=grid, variables=truth_vars, times=times, values=truth
    )
    return SyntheticWorld(
        truth=truth_series,
        ensembles=ens_cube,
        deterministic=det_cube,
        power=power,
        config=config,
    )


def farm_wind(truth: TrueWeather, lat: float, lon: float, hub_factor: float) -> np.ndarray:
    """Hub-height wind speed at the grid point nearest the farm."""
    nearest = int(truth.grid.nearest_indices(lat, lon, 1)[0])
    u = truth.values[:, nearest, truth.var_index("u10")]
    v = truth.values[:, nearest, truth.var_index("v10")]
    return hub_factor * np.hypot(u, v)


# ---------------------------------------------------------------------------
# power CSV
# ---------------------------------------------------------------------------

def write_power_csv(records: Sequence[PowerRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POWER_HEADER)
        for rec in records:
            writer.writerow(
                [
                    format_timestamp(rec.timestamp),
                    repr(rec.energy_mwh),
                    repr(rec.bav_mwh),
                    repr(rec.capacity_mw),
                ]
            )


def read_power_csv(path: str | Path) -> list[PowerRecord]:
    path = Path(path)
    records: list[PowerRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header") from None
        if header != POWER_HEADER:
            raise FormatError(
                f"{path}: bad header {header!r}, expected {POWER_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                rec = PowerRecord(
                    timestamp=parse_timestamp(row[0]),
                    energy_mwh=float(row[1]),
                    bav_mwh=float(row[2]),
                    capacity_mw=float(row[3]),
                )
            except (FormatError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp == prev.timestamp:
            raise FormatError(f"{path}: duplicate timestamp {cur.timestamp}")
        if cur.timestamp < prev.timestamp:
            raise FormatError(f"{path}: timestamps out of order at {cur.timestamp}")
    return records


# ---------------------------------------------------------------------------
# NWP CSV
# ---------------------------------------------------------------------------

def write_nwp_csv(
    forecasts: Sequence[EnsembleForecast] | Sequence[DeterministicForecast],
    path: str | Path,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NWP_HEADER)
        for fc in forecasts:
            base = format_timestamp(fc.index.base_time)
            if isinstance(fc, EnsembleForecast):
                member_values = [(m, fc.values[m]) for m in range(fc.n_members)]
            else:
                member_values = [(0, fc.values)]
            for m, tensor in member_values:
                for pi, (lat, lon) in enumerate(fc.grid.points):
                    for vi, var in enumerate(fc.variables):
                        writer.writerow(
                            [
                                base,
                                fc.index.horizon_hours,
                                m,
                                repr(lat),
                                repr(lon),
                                var,
                                repr(float(tensor[pi, vi])),
                            ]
                        )


def read_nwp_csv(
    path: str | Path,
) -> list[EnsembleForecast] | list[DeterministicForecast]:
    """Parse an NWP archive into per-(base time, horizon) forecasts.

    Single distinct member id means a deterministic file; otherwise every
    (member, point, variable) triple must be present for every index.
    """
    path = Path(path)
    rows: list[tuple[datetime, int, int, float, float, str, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header") from None
        if header != NWP_HEADER:
            raise FormatError(f"{path}: bad header {header!r}, expected {NWP_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(row)}")
            try:
                rows.append(
                    (
                        parse_timestamp(row[0]),
                        int(row[1]),
                        int(row[2]),
                        float(row[3]),
                        float(row[4]),
                        row[5],
                        float(row[6]),
                    )
                )
            except (FormatError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")

    points = sorted(set((r[3], r[4]) for r in rows))
    variables = tuple(sorted(set(r[5] for r in rows)))
    members = sorted(set(r[2] for r in rows))
    lats = sorted(set(p[0] for p in points))
    lons = sorted(set(p[1] for p in points))
    spacings = [d for axis in (lats, lons) if len(axis) > 1 for d in np.diff(axis)]
    resolution = float(min(spacings)) if spacings else 0.0
    grid = NwpGrid(points=tuple(points), resolution_deg=resolution)
    p_index = {p: i for i, p in enumerate(points)}
    v_index = {v: i for i, v in enumerate(variables)}
    m_index = {m: i for i, m in enumerate(members)}
    deterministic = len(members) == 1

    cells: dict[tuple[datetime, int], np.ndarray] = {}
    seen: dict[tuple[datetime, int], np.ndarray] = {}
    for base, horizon, member, lat, lon, var, value in rows:
        key = (base, horizon)
        if key not in cells:
            cells[key] = np.zeros((len(members), len(points), len(variables)))
            seen[key] = np.zeros((len(members), len(points), len(variables)), dtype=bool)
        loc = (m_index[member], p_index[(lat, lon)], v_index[var])
        if seen[key][loc]:
            raise FormatError(
                f"{path}: duplicate entry for base {format_timestamp(base)} "
                f"h{horizon} member {member} point ({lat}, {lon}) {var}"
            )
        cells[key][loc] = value
        seen[key][loc] = True

    for (base, horizon), mask in seen.items():
        if not mask.all():
            m, p, v = np.argwhere(~mask)[0]
            raise FormatError(
                f"{path}: missing value for base {format_timestamp(base)} h{horizon} "
                f"member {members[m]} point {points[p]} variable {variables[v]}"
            )

    out = []
    for (base, horizon) in sorted(cells):
        index = ForecastIndex(base, horizon)
        tensor = cells[(base, horizon)]
        if deterministic:
            out.append(
                DeterministicForecast(
                    index=index, grid=grid, variables=variables, values=tensor[0]
                )
            )
        else:
            out.append(
                EnsembleForecast(
                    index=index, grid=grid, variables=variables, values=tensor
                )
            )
    return out


__all__ = [
    "DETERMINISTIC_VARIABLES",
    "ENSEMBLE_VARIABLES",
    "DeterministicCube",
    "DeterministicForecast",
    "EnsembleCube",
    "EnsembleForecast",
    "FarmSite",
    "NwpGrid",
    "PowerCurve",
    "SyntheticWorld",
    "SyntheticWorldConfig",
    "TrueWeather",
    "farm_wind",
    "generate_synthetic",
    "haversine_km",
    "read_nwp_csv",
    "read_power_csv",
    "write_nwp_csv",
    "write_power_csv",
]
