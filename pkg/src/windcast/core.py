"""Domain types shared across the toolkit.

Power is handled in normalized units (energy over capacity times settlement
duration, in [0, 1]).  Forecasts are indexed by (base time, horizon); the
settlement series is matched to forecast valid times by interval containment.
All value objects are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

CLIP_TOL = 1e-9
SETTLEMENT_HOURS = 0.5


class WindcastError(Exception):
    """Base class for package errors."""


class InvalidRecordError(WindcastError, ValueError):
    """A power record violates basic validity (capacity, sign)."""


class InconsistentRecordError(InvalidRecordError):
    """Energy exceeds what the stated capacity can produce."""


class ConfigError(WindcastError, ValueError):
    """Run or world configuration is invalid."""


class SchemaError(WindcastError, ValueError):
    """Named columns/features do not match the expected schema."""


class FormatError(WindcastError, ValueError):
    """An input file violates its documented format."""


class ParameterError(WindcastError, ValueError):
    """A numeric parameter is outside its valid domain."""


class PipelineError(WindcastError, RuntimeError):
    """A forecasting stage is missing a fitted component it needs."""


class ArtifactMissingError(WindcastError, RuntimeError):
    """A stage was invoked before the stage producing its inputs."""


def ensure_utc(ts: datetime) -> datetime:
    """Return ``ts`` as a timezone-aware UTC datetime."""
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def derive_seed(seed: int, *tags: int) -> int:
    """Derive a child seed from a root seed and integer tags.

    Deterministic and collision-resistant via ``SeedSequence`` spawn keys, so
    independent components (per quantile, per horizon, per farm) get
    decorrelated streams without sharing mutable generator state.
    """
    if seed < 0:
        raise ParameterError(f"seed must be nonnegative, got {seed}")
    return int(np.random.SeedSequence((seed, *tags)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True, order=True)
class ForecastIndex:
    """Issue time plus lead time of one forecast step."""

    base_time: datetime
    horizon_hours: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_time", ensure_utc(self.base_time))
        if self.base_time.hour not in (0, 12) or self.base_time.minute != 0:
            raise ConfigError(
                f"base_time must be 00 or 12 UTC, got {self.base_time.isoformat()}"
            )
        if int(self.horizon_hours) != self.horizon_hours or self.horizon_hours < 0:
            raise ConfigError(f"horizon_hours must be a nonnegative integer, got {self.horizon_hours}")

    @property
    def valid_time(self) -> datetime:
        return self.base_time + timedelta(hours=int(self.horizon_hours))


def default_horizon_grid(start: int = 6, stop: int = 162, step: int = 6) -> tuple[int, ...]:
    """Forecast lead times in hours; 27 values for the standard run."""
    if step <= 0 or start <= 0 or stop < start:
        raise ConfigError(f"invalid horizon grid ({start}, {stop}, {step})")
    return tuple(range(start, stop + 1, step))


@dataclass(frozen=True)
class PowerRecord:
    """One settlement-period observation for a farm."""

    timestamp: datetime
    energy_mwh: float
    bav_mwh: float
    capacity_mw: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamp", ensure_utc(self.timestamp))


@dataclass(frozen=True)
class QuantileGrid:
    """Ordered probability levels for quantile forecasts."""

    levels: tuple[float, ...]

    def __post_init__(self) -> None:
        levels = tuple(float(t) for t in self.levels)
        if not levels:
            raise ConfigError("quantile grid must be nonempty")
        if any(not 0.0 < t < 1.0 for t in levels):
            raise ConfigError(f"quantile levels must lie in (0,1): {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError(f"quantile levels must be strictly increasing: {levels}")
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def standard_quantile_grid() -> QuantileGrid:
    """5% .. 95% in 5% steps (19 levels)."""
    return QuantileGrid(tuple(round(0.05 * i, 2) for i in range(1, 20)))


def kernel_quantile_grid() -> QuantileGrid:
    """The {25, 50, 75}% grid used for kernel dressing."""
    return QuantileGrid((0.25, 0.50, 0.75))


@dataclass(frozen=True)
class QuantileSet:
    """Predicted power quantiles for one (base time, horizon)."""

    grid: QuantileGrid
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if len(values) != len(self.grid):
            raise ParameterError(
                f"{len(values)} values for {len(self.grid)} quantile levels"
            )
        if not all(np.isfinite(values)):
            raise ParameterError(f"quantile values must be finite: {values}")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ParameterError(f"quantile values must be nondecreasing: {values}")
        object.__setattr__(self, "values", values)

    def value_at(self, tau: float) -> float:
        try:
            return self.values[self.grid.levels.index(tau)]
        except ValueError:
            raise ParameterError(f"level {tau} not in grid {self.grid.levels}") from None

    @property
    def iqr(self) -> float:
        """q75 - q25; requires both levels on the grid."""
        return self.value_at(0.75) - self.value_at(0.25)


@dataclass(frozen=True)
class UncertaintyProfile:
    """Weather-input vs weather-to-power uncertainty at one horizon."""

    horizon_hours: int
    u_nwp: float
    u_w2p: float

    def __post_init__(self) -> None:
        if self.u_nwp < 0 or self.u_w2p < 0:
            raise ParameterError("uncertainty components must be nonnegative")


def normalize_power(record: PowerRecord, period_hours: float = SETTLEMENT_HOURS) -> float:
    """Energy as a fraction of what capacity could produce over the period."""
    if record.capacity_mw <= 0:
        raise InvalidRecordError(
            f"capacity must be positive, got {record.capacity_mw} at {record.timestamp}"
        )
    if period_hours <= 0:
        raise ParameterError(f"period_hours must be positive, got {period_hours}")
    value = record.energy_mwh / (record.capacity_mw * period_hours)
    if value < -CLIP_TOL:
        raise InvalidRecordError(
            f"negative energy {record.energy_mwh} at {record.timestamp}"
        )
    if value > 1.0 + CLIP_TOL:
        raise InconsistentRecordError(
            f"energy {record.energy_mwh} exceeds capacity {record.capacity_mw} MW "
            f"over {period_hours} h at {record.timestamp}"
        )
    return min(max(value, 0.0), 1.0)


def denormalize_power(
    power: float, capacity_mw: float, period_hours: float = SETTLEMENT_HOURS
) -> float:
    """Inverse of :func:`normalize_power` (energy in MWh)."""
    if capacity_mw <= 0:
        raise InvalidRecordError(f"capacity must be positive, got {capacity_mw}")
    return power * capacity_mw * period_hours


def filter_curtailed(records: Sequence[PowerRecord]) -> list[PowerRecord]:
    """Keep exactly the records with zero bid acceptance volume, order preserved."""
    return [r for r in records if r.bav_mwh == 0.0]


@dataclass(frozen=True)
class SplitResult:
    """Chronological estimation/test partition of a power series."""

    half_a: tuple[PowerRecord, ...]
    half_b: tuple[PowerRecord, ...]
    test: tuple[PowerRecord, ...]
    label: str

    @property
    def estimation(self) -> tuple[PowerRecord, ...]:
        return self.half_a + self.half_b

    @property
    def mid_time(self) -> datetime | None:
        """First timestamp of half B (boundary between the halves)."""
        return self.half_b[0].timestamp if self.half_b else None


def split_estimation_test(
    records: Sequence[PowerRecord],
    test_year: int,
    estimation_years: Sequence[int],
) -> SplitResult:
    """Partition records into estimation halves A/B and a test year.

    Half A serves the weather-to-power fit and tuning, half B the
    combination/calibration coefficients; the halves split chronologically at
    the midpoint sample.
    """
    est_years = sorted(set(int(y) for y in estimation_years))
    if not est_years:
        raise ConfigError("estimation_years must be nonempty")
    if test_year in est_years:
        raise ConfigError(f"test year {test_year} overlaps estimation years {est_years}")
    if max(est_years) >= test_year:
        raise ConfigError(
            f"estimation years {est_years} must strictly precede test year {test_year}"
        )
    ordered = sorted(records, key=lambda r: r.timestamp)
    estimation = [r for r in ordered if r.timestamp.year in est_years]
    test = [r for r in ordered if r.timestamp.year == test_year]
    mid = len(estimation) // 2
    label = f"{test_year}-{len(est_years)}y"
    return SplitResult(
        half_a=tuple(estimation[:mid]),
        half_b=tuple(estimation[mid:]),
        test=tuple(test),
        label=label,
    )


def match_settlement(
    records: Sequence[PowerRecord],
    valid_times: Sequence[datetime],
    period_hours: float = SETTLEMENT_HOURS,
) -> np.ndarray:
    """Index of the settlement record whose interval contains each valid time.

    Returns -1 where no record's interval [timestamp, timestamp + period)
    contains the valid time.  Records must be in timestamp order.
    """
    starts = np.array(
        [ensure_utc(r.timestamp).timestamp() for r in records], dtype=np.float64
    )
    if np.any(np.diff(starts) <= 0):
        raise FormatError("settlement records must be strictly increasing in time")
    targets = np.array([ensure_utc(t).timestamp() for t in valid_times], dtype=np.float64)
    pos = np.searchsorted(starts, targets, side="right") - 1
    out = np.full(len(targets), -1, dtype=np.int64)
    in_range = pos >= 0
    period_s = period_hours * 3600.0
    hit = in_range & (targets - starts[np.clip(pos, 0, None)] < period_s)
    out[hit] = pos[hit]
    return out
