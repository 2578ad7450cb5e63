"""Method assembly: shared fit stages and per-method forecast construction.

Five methods share the same building blocks.  The ensemble routes convert
each member to power with quantile GBTs trained on analysis weather (half A
of the estimation period); the deterministic routes fit one GBT per
(horizon, quantile) on engineered grid features.  Everything that corrects
or extends the raw power ensemble (combination coefficients, EMOS, GPD
tails) is estimated on half B, so the correction never sees its own
training data.  Forecast construction is pure given a fitted bundle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .combine import (
    CombinationCoefficients,
    EmosCoefficients,
    dress_kernels,
    emos_predict,
    fit_combination_table,
    fit_emos_table,
    pool_cdf,
)
from .core import (
    ConfigError,
    ForecastIndex,
    FormatError,
    ParameterError,
    PipelineError,
    PowerRecord,
    QuantileGrid,
    QuantileSet,
    SplitResult,
    derive_seed,
    kernel_quantile_grid,
    match_settlement,
    normalize_power,
    standard_quantile_grid,
)
from .dataio import DeterministicCube, EnsembleCube, FarmSite, format_timestamp
from .dists import (
    BoundedCdf,
    GpdTail,
    InterpolatedCdf,
    StepCdf,
    cdf_quantile,
    fit_gpd_mle,
)
from .features import (
    HRES_RECIPE,
    HRESC_RECIPE,
    FeatureMatrix,
    ensemble_member_inputs,
    ensemble_training_inputs,
    hres_features,
)
from .qgbt import (
    SEARCH_ENSEMBLE,
    SEARCH_HRES,
    GbtHyperparams,
    QGbtModel,
    SearchSpace,
    fit_quantile_model,
    model_from_json,
    model_to_json,
    predict_quantiles,
    tune_hyperparams,
)

BUNDLE_FORMAT = "windcast-fitted-method"
BUNDLE_VERSION = 1

# Seed stream tags so the stages never share random state.
_TAG_W2P = 0x32F
_TAG_COMBINE = 0xB77
_TAG_EMOS = 0xE05

# Fewer exceedances than this and the tail is not worth a parametric model;
# the CDF then keeps all mass inside the knot span on that side.
MIN_TAIL_EXCEEDANCES = 5


# ---------------------------------------------------------------------------
# method registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """Stage configuration of one named forecasting method."""

    name: str
    nwp_source: str  # "ens" | "hres" | "hresc"
    w2p_grid: QuantileGrid
    combiner: str  # "none" | "emos" | "bmm"
    gpd_tails: bool

    def __post_init__(self) -> None:
        if self.nwp_source not in ("ens", "hres", "hresc"):
            raise ConfigError(f"unknown NWP source {self.nwp_source!r}")
        if self.combiner not in ("none", "emos", "bmm"):
            raise ConfigError(f"unknown combiner {self.combiner!r}")
        if self.per_horizon_models and self.combiner != "none":
            raise ConfigError("deterministic routes do not use a combiner")

    @property
    def per_horizon_models(self) -> bool:
        """Deterministic routes fit separate GBTs per forecast horizon."""
        return self.nwp_source in ("hres", "hresc")

    def gbt_count(self, n_horizons: int) -> int:
        """Number of boosted ensembles the fit stage trains per farm."""
        per_horizon = n_horizons if self.per_horizon_models else 1
        return len(self.w2p_grid) * per_horizon


METHODS: dict[str, MethodSpec] = {
    spec.name: spec
    for spec in (
        MethodSpec("ENS-GBT-None", "ens", QuantileGrid((0.5,)), "none", True),
        MethodSpec("ENS-QGBT-None", "ens", standard_quantile_grid(), "none", True),
        MethodSpec("HRES-QGBT-None", "hres", standard_quantile_grid(), "none", True),
        MethodSpec("HRESc-QGBT-None", "hresc", standard_quantile_grid(), "none", True),
        MethodSpec("ENS-GBT-EMOS", "ens", QuantileGrid((0.5,)), "emos", False),
        MethodSpec("ENS-QGBT-BMM", "ens", kernel_quantile_grid(), "bmm", False),
    )
}


def method_spec(name: str) -> MethodSpec:
    try:
        return METHODS[name]
    except KeyError:
        known = ", ".join(sorted(METHODS))
        raise ConfigError(f"unknown method {name!r}; expected one of {known}") from None


# ---------------------------------------------------------------------------
# fitted bundles and forecasts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailPair:
    """GPD tails for one horizon; either side may be absent."""

    lower: GpdTail | None
    upper: GpdTail | None


@dataclass(frozen=True)
class FittedMethod:
    """Everything the forecast stage needs for one (method, farm)."""

    spec: MethodSpec
    farm: str
    horizons: tuple[int, ...]
    # Ensemble routes: one single-level model per w2p grid entry, shared by
    # all horizons.  Deterministic routes: the same stack per horizon.
    w2p_pooled: tuple[QGbtModel, ...] | None
    w2p_by_horizon: Mapping[int, tuple[QGbtModel, ...]] | None
    combination: Mapping[int, CombinationCoefficients] | None
    emos: Mapping[int, EmosCoefficients] | None
    tails: Mapping[int, TailPair] | None
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.w2p_pooled is None) == (self.w2p_by_horizon is None):
            raise ParameterError(
                "exactly one of w2p_pooled / w2p_by_horizon must be set"
            )
        if not self.horizons:
            raise ParameterError("need at least one forecast horizon")

    @property
    def n_gbts(self) -> int:
        """Boosted ensembles held by this bundle (one per quantile level)."""
        if self.w2p_pooled is not None:
            return sum(len(m.tau_grid) for m in self.w2p_pooled)
        return sum(
            len(m.tau_grid)
            for stack in self.w2p_by_horizon.values()
            for m in stack
        )


@dataclass(frozen=True)
class ForecastRun:
    """One predictive CDF, keyed by method, farm and forecast step."""

    method: str
    farm: str
    index: ForecastIndex
    output: BoundedCdf


# ---------------------------------------------------------------------------
# shared fit stages
# ---------------------------------------------------------------------------

def _matched_rows(
    records: Sequence[PowerRecord], times: Sequence[datetime]
) -> tuple[np.ndarray, np.ndarray]:
    """Row mask over ``times`` plus normalized power for the matched rows."""
    idx = match_settlement(records, times)
    mask = idx >= 0
    y = np.array([normalize_power(records[i]) for i in idx[mask]], dtype=np.float64)
    return mask, y


def _fit_tau_stack(
    X: np.ndarray,
    y: np.ndarray,
    grid: QuantileGrid,
    names: Sequence[str],
    space: SearchSpace,
    tuning_budget: int,
    seed: int,
    source_tag: int,
    horizon_tag: int = 0,
) -> tuple[QGbtModel, ...]:
    """One single-level model per quantile, each tuned on its own pinball CV.

    ``tuning_budget`` 0 skips the search and fits the space's base
    hyperparameters directly.
    """
    stack = []
    for tau in grid:
        tau_tag = round(tau * 1000)
        child = derive_seed(seed, _TAG_W2P, source_tag, horizon_tag, tau_tag)
        if tuning_budget > 0:
            hp = tune_hyperparams(X, y, tau, tuning_budget, child, space=space)
        else:
            hp = GbtHyperparams()
        stack.append(
            fit_quantile_model(X, y, (tau,), hp, child, feature_names=names)
        )
    return tuple(stack)


def _predict_grid(stack: Sequence[QGbtModel], X: np.ndarray) -> np.ndarray:
    """Stack per-level predictions, rearrange ascending, clip to [0, 1]."""
    cols = np.column_stack([predict_quantiles(model, X) for model in stack])
    cols.sort(axis=1)
    return cols


def _split_window(split: SplitResult, which: str) -> tuple[PowerRecord, ...]:
    return {"a": split.half_a, "b": split.half_b, "test": split.test}[which]


def _fit_tails(
    q_lo: np.ndarray,
    q_hi: np.ndarray,
    y: np.ndarray,
    attach_lo: float,
    attach_hi: float,
) -> TailPair:
    """GPD tails from observations falling outside the predicted 5%/95% band.

    Exceedances pool everything the arrays cover; the fitted shape and scale
    are reattached at the CDF's outer knot levels.  Sides with almost no
    exceedances stay unmodelled rather than carrying a two-point fit.
    """
    lower = None
    upper = None
    attach_lo = float(attach_lo)
    attach_hi = float(attach_hi)
    exc_lo = q_lo[y < q_lo] - y[y < q_lo]
    exc_hi = y[y > q_hi] - q_hi[y > q_hi]
    if len(exc_lo) >= MIN_TAIL_EXCEEDANCES:
        fit = fit_gpd_mle(exc_lo, threshold_quantile=attach_lo)
        lower = GpdTail(fit.tail.psi, fit.tail.xi, attach_lo)
    if len(exc_hi) >= MIN_TAIL_EXCEEDANCES:
        fit = fit_gpd_mle(exc_hi, threshold_quantile=attach_hi)
        upper = GpdTail(fit.tail.psi, fit.tail.xi, attach_hi)
    return TailPair(lower, upper)


def _knots_to_cdf(
    values: np.ndarray, taus: np.ndarray, tails: TailPair | None
) -> BoundedCdf:
    """Interpolated CDF through the knots; a flat knot set degenerates to a
    point mass (tails would hang off a zero-width band)."""
    if np.ptp(values) == 0.0:
        return StepCdf(float(values[0]))
    lower = tails.lower if tails is not None else None
    upper = tails.upper if tails is not None else None
    return InterpolatedCdf(values, taus, lower_tail=lower, upper_tail=upper)


# ---------------------------------------------------------------------------
# per-farm fit input bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FarmInputs:
    """NWP archives and settlement series for one farm."""

    farm: FarmSite
    ensemble: EnsembleCube
    deterministic: DeterministicCube | None
    power: tuple[PowerRecord, ...]


class _StageCache:
    """Feature matrices and member inputs shared across methods of one farm.

    The four ensemble routes must consume byte-identical training features;
    building them once makes that true by construction instead of by test.
    """

    def __init__(self, inputs: FarmInputs):
        self.inputs = inputs
        self._ens_training: FeatureMatrix | None = None
        self._hres: dict[str, FeatureMatrix] = {}
        self._members: dict[int, tuple[tuple[datetime, ...], np.ndarray]] = {}

    def ens_training(self) -> FeatureMatrix:
        if self._ens_training is None:
            farm = self.inputs.farm
            self._ens_training = ensemble_training_inputs(
                self.inputs.ensemble, farm.lat, farm.lon
            )
        return self._ens_training

    def hres(self, source: str) -> FeatureMatrix:
        if source not in self._hres:
            if self.inputs.deterministic is None:
                raise PipelineError(
                    f"method needs a deterministic NWP archive for farm "
                    f"{self.inputs.farm.name!r}"
                )
            recipe = HRES_RECIPE if source == "hres" else HRESC_RECIPE
            farm = self.inputs.farm
            self._hres[source] = hres_features(
                self.inputs.deterministic, farm.lat, farm.lon, recipe
            )
        return self._hres[source]

    def members(self, horizon: int) -> tuple[tuple[datetime, ...], np.ndarray]:
        if horizon not in self._members:
            farm = self.inputs.farm
            self._members[horizon] = ensemble_member_inputs(
                self.inputs.ensemble, farm.lat, farm.lon, horizon
            )
        return self._members[horizon]


def _member_quantiles(
    cache: _StageCache,
    stack: Sequence[QGbtModel],
    horizon: int,
    records: Sequence[PowerRecord],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-member predicted quantiles matched to observed power at one horizon.

    Returns ``(pred, y)`` with ``pred`` of shape (pairs, members, levels).
    """
    valid_times, feats = cache.members(horizon)
    mask, y = _matched_rows(records, valid_times)
    if not np.any(mask):
        return np.empty((0, feats.shape[1], len(stack))), y
    kept = feats[mask]
    n, m, p = kept.shape
    pred = _predict_grid(stack, kept.reshape(n * m, p)).reshape(n, m, -1)
    return pred, y


# ---------------------------------------------------------------------------
# fit stage
# ---------------------------------------------------------------------------

def fit_methods(
    inputs: FarmInputs,
    specs: Sequence[MethodSpec],
    split: SplitResult,
    *,
    horizons: Sequence[int] | None = None,
    tuning_budget: int = 12,
    seed: int = 0,
    combine_options: Mapping[str, object] | None = None,
) -> dict[str, FittedMethod]:
    """Fit several methods for one farm, sharing stage outputs.

    Weather-to-power models train on estimation half A; combination, EMOS
    and tail fits use half B so they correct out-of-sample behaviour.  Any
    two methods that need the same single-quantile model get the same fit
    (same data, same seed), but each bundle reports its own model count.
    """
    if not specs:
        raise ConfigError("no methods requested")
    if horizons is None:
        horizons = [h for h in inputs.ensemble.horizons if h > 0]
    horizons = tuple(int(h) for h in horizons)
    if not horizons:
        raise ConfigError("no forecast horizons requested")
    records = split.estimation
    if not records:
        raise PipelineError(f"no estimation records for farm {inputs.farm.name!r}")
    combine_options = dict(combine_options or {})

    cache = _StageCache(inputs)
    ens_stack_cache: dict[float, QGbtModel] = {}
    fitted: dict[str, FittedMethod] = {}

    def ens_stack(grid: QuantileGrid) -> tuple[QGbtModel, ...]:
        missing = [t for t in grid if t not in ens_stack_cache]
        if missing:
            fm = cache.ens_training()
            mask, y = _matched_rows(split.half_a, fm.times)
            if not np.any(mask):
                raise PipelineError(
                    f"no half-A training rows for farm {inputs.farm.name!r}"
                )
            stack = _fit_tau_stack(
                fm.values[mask], y, QuantileGrid(tuple(missing)), fm.names,
                SEARCH_ENSEMBLE, tuning_budget, seed, source_tag=0,
            )
            ens_stack_cache.update(zip(missing, stack))
        return tuple(ens_stack_cache[t] for t in grid)

    for spec in specs:
        if spec.per_horizon_models:
            fitted[spec.name] = _fit_deterministic(
                cache, spec, split, horizons, tuning_budget, seed
            )
        else:
            fitted[spec.name] = _fit_ensemble(
                cache, spec, split, horizons, seed, combine_options, ens_stack
            )
    return fitted


def fit_method(
    inputs: FarmInputs,
    spec: MethodSpec,
    split: SplitResult,
    **kwargs,
) -> FittedMethod:
    """Fit one method; see :func:`fit_methods`."""
    return fit_methods(inputs, [spec], split, **kwargs)[spec.name]


def _fit_ensemble(
    cache: _StageCache,
    spec: MethodSpec,
    split: SplitResult,
    horizons: tuple[int, ...],
    seed: int,
    combine_options: Mapping[str, object],
    ens_stack: Callable[[QuantileGrid], tuple[QGbtModel, ...]],
) -> FittedMethod:
    farm = cache.inputs.farm.name
    stack = ens_stack(spec.w2p_grid)

    combination = None
    emos = None
    tails = None
    if spec.combiner == "bmm":
        data = {}
        for h in horizons:
            pred, y = _member_quantiles(cache, stack, h, split.half_b)
            levels = spec.w2p_grid.levels
            mu = pred[:, :, levels.index(0.5)]
            iqr = pred[:, :, levels.index(0.75)] - pred[:, :, levels.index(0.25)]
            data[h] = (mu, iqr, y)
        combination = fit_combination_table(
            data, seed=derive_seed(seed, _TAG_COMBINE), **combine_options
        )
    elif spec.combiner == "emos":
        data = {}
        for h in horizons:
            pred, y = _member_quantiles(cache, stack, h, split.half_b)
            data[h] = (pred[:, :, 0], y)
        emos = fit_emos_table(data, seed=derive_seed(seed, _TAG_EMOS))
    if spec.gpd_tails:
        tails = {}
        for h in horizons:
            pred, y = _member_quantiles(cache, stack, h, split.half_b)
            knots, attach = _ensemble_knots(pred, spec)
            if len(y) == 0:
                tails[h] = TailPair(None, None)
                continue
            q_lo, q_hi = _band_from_knots(knots, attach, spec.w2p_grid)
            tails[h] = _fit_tails(q_lo, q_hi, y, attach[0], attach[-1])

    return FittedMethod(
        spec=spec,
        farm=farm,
        horizons=horizons,
        w2p_pooled=stack,
        w2p_by_horizon=None,
        combination=combination,
        emos=emos,
        tails=tails,
    )


def _ensemble_knots(
    pred: np.ndarray, spec: MethodSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Knot values and levels of the tail-free CDF per row.

    ENS-GBT-None treats the sorted member medians as quantiles at plotting
    positions i/(m+1); ENS-QGBT-None averages the member quantile curves.
    """
    if len(spec.w2p_grid) == 1:
        knots = np.sort(pred[:, :, 0], axis=1)
        m = knots.shape[1]
        attach = np.arange(1, m + 1) / (m + 1)
    else:
        knots = pred.mean(axis=1)
        attach = np.asarray(spec.w2p_grid.levels)
    return knots, attach


def _band_from_knots(
    knots: np.ndarray, taus: np.ndarray, grid: QuantileGrid
) -> tuple[np.ndarray, np.ndarray]:
    levels = grid.levels
    if 0.05 in levels and 0.95 in levels:
        idx_lo = levels.index(0.05)
        idx_hi = levels.index(0.95)
        return knots[:, idx_lo], knots[:, idx_hi]
    q_lo = np.empty(len(knots))
    q_hi = np.empty(len(knots))
    for i, row in enumerate(knots):
        cdf = _knots_to_cdf(row, taus, None)
        q_lo[i] = cdf_quantile(cdf, 0.05)
        q_hi[i] = cdf_quantile(cdf, 0.95)
    return q_lo, q_hi


def _fit_deterministic(
    cache: _StageCache,
    spec: MethodSpec,
    split: SplitResult,
    horizons: tuple[int, ...],
    tuning_budget: int,
    seed: int,
) -> FittedMethod:
    farm = cache.inputs.farm.name
    fm = cache.hres(spec.nwp_source)
    source_tag = 1 if spec.nwp_source == "hres" else 2
    available = set(int(h) for h in np.unique(fm.horizons))
    missing = [h for h in horizons if h not in available]
    if missing:
        raise PipelineError(
            f"deterministic archive lacks features at horizons {missing} "
            f"for farm {farm!r}"
        )

    by_horizon: dict[int, tuple[QGbtModel, ...]] = {}
    tails: dict[int, TailPair] = {}
    taus = np.asarray(spec.w2p_grid.levels)
    for h in horizons:
        rows_h = fm.horizons == h
        times_h = [t for t, keep in zip(fm.times, rows_h) if keep]
        X_h = fm.values[rows_h]
        mask_a, y_a = _matched_rows(split.half_a, times_h)
        if not np.any(mask_a):
            raise PipelineError(
                f"no half-A training rows at horizon {h} for farm {farm!r}"
            )
        stack = _fit_tau_stack(
            X_h[mask_a], y_a, spec.w2p_grid, fm.names,
            SEARCH_HRES, tuning_budget, seed, source_tag, horizon_tag=h,
        )
        by_horizon[h] = stack

        mask_b, y_b = _matched_rows(split.half_b, times_h)
        if spec.gpd_tails and np.any(mask_b):
            pred = _predict_grid(stack, X_h[mask_b])
            q_lo, q_hi = _band_from_knots(pred, taus, spec.w2p_grid)
            tails[h] = _fit_tails(q_lo, q_hi, y_b, taus[0], taus[-1])
        elif spec.gpd_tails:
            tails[h] = TailPair(None, None)

    return FittedMethod(
        spec=spec,
        farm=farm,
        horizons=horizons,
        w2p_pooled=None,
        w2p_by_horizon=by_horizon,
        combination=None,
        emos=None,
        tails=tails if spec.gpd_tails else None,
    )


# ---------------------------------------------------------------------------
# forecast stage
# ---------------------------------------------------------------------------

def _require(condition: bool, message: str) -> None:
    if not condition:
        raise PipelineError(message)


def run_ens_qgbt_bmm(
    member_quantiles: Sequence[QuantileSet],
    coeffs: CombinationCoefficients,
) -> BoundedCdf:
    """Dress each member's quantile set and pool under the beta transform."""
    _require(len(member_quantiles) >= 1, "need at least one member quantile set")
    kernels = dress_kernels(member_quantiles, coeffs)
    return pool_cdf(kernels, coeffs.a, coeffs.b)


def run_ens_gbt_none(
    member_medians: Sequence[float], tails: TailPair | None
) -> BoundedCdf:
    """Sorted member medians as quantiles at plotting positions i/(m+1)."""
    values = np.sort(np.asarray(member_medians, dtype=np.float64))
    _require(len(values) >= 2, f"need at least 2 members, got {len(values)}")
    taus = np.arange(1, len(values) + 1) / (len(values) + 1)
    return _knots_to_cdf(values, taus, tails)


def run_ens_qgbt_none(
    member_quantiles: Sequence[QuantileSet], tails: TailPair | None
) -> BoundedCdf:
    """Average the member quantile curves level by level."""
    _require(len(member_quantiles) >= 1, "need at least one member quantile set")
    grid = member_quantiles[0].grid
    _require(
        all(q.grid.levels == grid.levels for q in member_quantiles),
        "member quantile sets must share one grid",
    )
    values = np.mean([q.values for q in member_quantiles], axis=0)
    return _knots_to_cdf(values, np.asarray(grid.levels), tails)


def run_hres_qgbt(
    quantiles: QuantileSet, tails: TailPair | None
) -> BoundedCdf:
    """Interpolate the per-horizon quantile model's output."""
    values = np.asarray(quantiles.values, dtype=np.float64)
    return _knots_to_cdf(values, np.asarray(quantiles.grid.levels), tails)


def run_ens_gbt_emos(
    member_medians: Sequence[float], coeffs: EmosCoefficients
) -> BoundedCdf:
    """Gamma predictive distribution from the power ensemble's moments."""
    medians = np.asarray(member_medians, dtype=np.float64)
    _require(medians.ndim == 1 and len(medians) >= 2,
             f"need at least 2 members, got {medians.size}")
    return emos_predict(coeffs, medians)


def forecast_method(
    fitted: FittedMethod,
    inputs: FarmInputs,
    *,
    base_times: Sequence[datetime] | None = None,
    horizons: Sequence[int] | None = None,
) -> list[ForecastRun]:
    """Build one CDF per (base time, horizon) from a fitted bundle."""
    spec = fitted.spec
    horizons = tuple(int(h) for h in (horizons or fitted.horizons))
    missing = [h for h in horizons if h not in fitted.horizons]
    _require(not missing, f"bundle has no fit for horizons {missing}")
    cache = _StageCache(inputs)
    wanted = None if base_times is None else {ensure_base(b) for b in base_times}

    runs: list[ForecastRun] = []
    if spec.per_horizon_models:
        fm = cache.hres(spec.nwp_source)
        for h in horizons:
            stack = fitted.w2p_by_horizon.get(h)
            _require(stack is not None, f"no weather-to-power model at horizon {h}")
            rows_h = np.flatnonzero(fm.horizons == h)
            keep = [
                r for r in rows_h
                if wanted is None or fm.base_times[r] in wanted
            ]
            if not keep:
                continue
            pred = _predict_grid(stack, fm.values[keep])
            tails_h = fitted.tails.get(h) if fitted.tails is not None else None
            for row, r in zip(pred, keep):
                qset = QuantileSet(spec.w2p_grid, tuple(row))
                runs.append(
                    ForecastRun(
                        spec.name,
                        fitted.farm,
                        ForecastIndex(fm.base_times[r], h),
                        run_hres_qgbt(qset, tails_h),
                    )
                )
        runs.sort(key=lambda run: (run.index.base_time, run.index.horizon_hours))
        return runs

    cube = inputs.ensemble
    for h in horizons:
        _require(h in cube.horizons, f"ensemble archive lacks horizon {h}")
        _, feats = cache.members(h)
        n, m, p = feats.shape
        pred = _predict_grid(fitted.w2p_pooled, feats.reshape(n * m, p))
        pred = pred.reshape(n, m, -1)
        tails_h = fitted.tails.get(h) if fitted.tails is not None else None
        if spec.combiner == "bmm":
            coeffs = (fitted.combination or {}).get(h)
            _require(coeffs is not None, f"no combination coefficients at horizon {h}")
        elif spec.combiner == "emos":
            coeffs = (fitted.emos or {}).get(h)
            _require(coeffs is not None, f"no EMOS coefficients at horizon {h}")

        for i, base in enumerate(cube.base_times):
            if wanted is not None and base not in wanted:
                continue
            if spec.combiner == "bmm":
                sets = [
                    QuantileSet(spec.w2p_grid, tuple(pred[i, j]))
                    for j in range(m)
                ]
                cdf = run_ens_qgbt_bmm(sets, coeffs)
            elif spec.combiner == "emos":
                cdf = run_ens_gbt_emos(pred[i, :, 0], coeffs)
            elif len(spec.w2p_grid) == 1:
                cdf = run_ens_gbt_none(pred[i, :, 0], tails_h)
            else:
                sets = [
                    QuantileSet(spec.w2p_grid, tuple(pred[i, j]))
                    for j in range(m)
                ]
                cdf = run_ens_qgbt_none(sets, tails_h)
            runs.append(
                ForecastRun(spec.name, fitted.farm, ForecastIndex(base, h), cdf)
            )
    runs.sort(key=lambda run: (run.index.base_time, run.index.horizon_hours))
    return runs


def member_quantile_forecasts(
    fitted: FittedMethod,
    inputs: FarmInputs,
    *,
    base_times: Sequence[datetime] | None = None,
    horizons: Sequence[int] | None = None,
) -> dict[int, tuple[tuple[datetime, ...], np.ndarray]]:
    """Per-member quantile curves before any combination step.

    The uncertainty decomposition needs the raw member cloud: the spread
    across member medians measures weather uncertainty, the width within
    each member's curve measures conversion uncertainty.  Returns, per
    horizon, the kept base times and an array of shape
    (bases, members, levels) on the bundle's weather-to-power grid.  Only
    ensemble routes carry a pooled stack to evaluate per member.
    """
    _require(
        fitted.w2p_pooled is not None,
        f"method {fitted.spec.name!r} has no per-member quantile curves",
    )
    horizons = tuple(int(h) for h in (horizons or fitted.horizons))
    missing = [h for h in horizons if h not in fitted.horizons]
    _require(not missing, f"bundle has no fit for horizons {missing}")
    cache = _StageCache(inputs)
    wanted = None if base_times is None else {ensure_base(b) for b in base_times}
    cube = inputs.ensemble
    out: dict[int, tuple[tuple[datetime, ...], np.ndarray]] = {}
    for h in horizons:
        _require(h in cube.horizons, f"ensemble archive lacks horizon {h}")
        _, feats = cache.members(h)
        n, m, p = feats.shape
        pred = _predict_grid(fitted.w2p_pooled, feats.reshape(n * m, p))
        pred = pred.reshape(n, m, -1)
        if wanted is None:
            keep = np.arange(n)
        else:
            keep = np.flatnonzero([b in wanted for b in cube.base_times])
        out[h] = (tuple(cube.base_times[i] for i in keep), pred[keep])
    return out


def ensure_base(value: datetime) -> datetime:
    """Normalize a base time the same way ForecastIndex does."""
    return ForecastIndex(value, 0).base_time


# ---------------------------------------------------------------------------
# forecast CSV artifact
# ---------------------------------------------------------------------------

FORECAST_HEADER = "method,farm,base_time,horizon_h,tau,value,omega0,omega1"


def write_forecast_csv(
    runs: Iterable[ForecastRun],
    path,
    tau_grid: QuantileGrid | None = None,
) -> int:
    """Long-format quantile export; returns the number of rows written.

    Each (method, farm, base time, horizon) contributes one row per level of
    ``tau_grid`` plus the boundary masses, enough to rebuild a bounded CDF.
    """
    grid = tau_grid if tau_grid is not None else standard_quantile_grid()
    taus = np.asarray(grid.levels)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FORECAST_HEADER + "\n")
        for run in runs:
            values = cdf_quantile(run.output, taus)
            w0 = run.output.omega0
            w1 = run.output.omega1
            stamp = format_timestamp(run.index.base_time)
            for tau, value in zip(taus, values):
                fh.write(
                    f"{run.method},{run.farm},{stamp},{run.index.horizon_hours},"
                    f"{tau:.6g},{value:.9f},{w0:.9f},{w1:.9f}\n"
                )
                n += 1
    return n


# ---------------------------------------------------------------------------
# bundle serialization
# ---------------------------------------------------------------------------

def _tail_to_json(tail: GpdTail | None) -> dict | None:
    if tail is None:
        return None
    return {
        "psi": tail.psi,
        "xi": tail.xi,
        "threshold_quantile": tail.threshold_quantile,
        "eta": tail.eta,
    }


def _tail_from_json(doc: dict | None) -> GpdTail | None:
    if doc is None:
        return None
    return GpdTail(doc["psi"], doc["xi"], doc["threshold_quantile"], doc.get("eta", 0.0))


def bundle_to_json(fitted: FittedMethod) -> dict:
    doc: dict = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "method": fitted.spec.name,
        "farm": fitted.farm,
        "horizons": list(fitted.horizons),
        "diagnostics": dict(fitted.diagnostics),
    }
    if fitted.w2p_pooled is not None:
        doc["w2p_pooled"] = [model_to_json(m) for m in fitted.w2p_pooled]
    if fitted.w2p_by_horizon is not None:
        doc["w2p_by_horizon"] = {
            str(h): [model_to_json(m) for m in stack]
            for h, stack in fitted.w2p_by_horizon.items()
        }
    if fitted.combination is not None:
        doc["combination"] = {
            str(h): {
                "lambda0": c.lambda0, "lambda1": c.lambda1, "a": c.a, "b": c.b,
                "mean_crps": c.mean_crps, "iterations": c.iterations,
                "fallback": c.fallback,
            }
            for h, c in fitted.combination.items()
        }
    if fitted.emos is not None:
        doc["emos"] = {
            str(h): {
                "c0": c.c0, "c1": c.c1, "c2": c.c2, "c3": c.c3,
                "mean_crps": c.mean_crps, "iterations": c.iterations,
                "fallback": c.fallback,
            }
            for h, c in fitted.emos.items()
        }
    if fitted.tails is not None:
        doc["tails"] = {
            str(h): {
                "lower": _tail_to_json(pair.lower),
                "upper": _tail_to_json(pair.upper),
            }
            for h, pair in fitted.tails.items()
        }
    return doc


def bundle_from_json(doc: dict) -> FittedMethod:
    if doc.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"not a fitted-method document: {doc.get('format')!r}")
    if doc.get("version") != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {doc.get('version')!r}")
    spec = method_spec(doc["method"])
    pooled = None
    by_horizon = None
    if "w2p_pooled" in doc:
        pooled = tuple(model_from_json(m) for m in doc["w2p_pooled"])
    if "w2p_by_horizon" in doc:
        by_horizon = {
            int(h): tuple(model_from_json(m) for m in stack)
            for h, stack in doc["w2p_by_horizon"].items()
        }
    combination = None
    if "combination" in doc:
        combination = {
            int(h): CombinationCoefficients(**c)
            for h, c in doc["combination"].items()
        }
    emos = None
    if "emos" in doc:
        emos = {int(h): EmosCoefficients(**c) for h, c in doc["emos"].items()}
    tails = None
    if "tails" in doc:
        tails = {
            int(h): TailPair(
                _tail_from_json(pair["lower"]), _tail_from_json(pair["upper"])
            )
            for h, pair in doc["tails"].items()
        }
    return FittedMethod(
        spec=spec,
        farm=doc["farm"],
        horizons=tuple(doc["horizons"]),
        w2p_pooled=pooled,
        w2p_by_horizon=by_horizon,
        combination=combination,
        emos=emos,
        tails=tails,
        diagnostics=doc.get("diagnostics", {}),
    )
