"""Ensemble combination stage.

Each ensemble member's predicted power quantiles are dressed into a Normal
kernel (mean at the median, spread linear in the interquartile range); the
kernel average is then recalibrated through a beta transform.  The four
coefficients are fitted per horizon by minimizing mean CRPS with a
derivative-free simplex in a transformed space that keeps them feasible by
construction.  The Gamma-EMOS reference calibration lives here too, since it
is the same shape of problem: a small coefficient vector fitted per horizon
against a scoring rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc, ndtr

from ._accel import get_kernels
from .core import FormatError, ParameterError, QuantileSet, derive_seed
from .dists import BoundedCdf, GammaCdf, beta_transform_tables, crps_gamma_closed

logger = logging.getLogger(__name__)

IDENTITY_START = (0.05, 1.0, 1.0, 1.0)
EMOS_START = (0.01, 1.0, 0.05, 0.5)
DEFAULT_MIN_PAIRS = 50
FIT_GRID = 129
SIGMA_FLOOR = 1e-4
GAMMA_Y_OFFSET = 1e-6

TABLE_FORMAT = "windcast-combination"
EMOS_FORMAT = "windcast-emos"
TABLE_VERSION = 1


@dataclass(frozen=True)
class KernelParams:
    """Per-member Normal kernels on the normalized power axis.

    Members are exchangeable, so kernels are stored sorted by (mu, sigma);
    pooled values are then bit-identical under member relabeling.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or mu.shape != sigma.shape or mu.size < 1:
            raise ParameterError("kernel mu and sigma must be equal-length vectors")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ParameterError("kernel parameters must be finite")
        if np.any(sigma <= 0.0):
            raise ParameterError("kernel sigma must be positive")
        order = np.lexsort((sigma, mu))
        object.__setattr__(self, "mu", mu[order])
        object.__setattr__(self, "sigma", sigma[order])

    @property
    def n_members(self) -> int:
        return int(self.mu.size)


@dataclass(frozen=True)
class CombinationCoefficients:
    """One horizon's dressing and beta-transform coefficients."""

    lambda0: float
    lambda1: float
    a: float
    b: float
    mean_crps: float = float("nan")
    iterations: int = 0
    fallback: str = ""

    def __post_init__(self) -> None:
        for name in ("lambda0", "lambda1", "a", "b"):
            if not np.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")
        if self.lambda0 <= 0.0:
            raise ParameterError(f"lambda0 must be positive, got {self.lambda0}")
        if self.lambda1 < 0.0:
            raise ParameterError(f"lambda1 must be nonnegative, got {self.lambda1}")
        if self.a <= 0.0 or self.b <= 0.0:
            raise ParameterError(f"a and b must be positive, got {self.a}, {self.b}")


def identity_coefficients() -> CombinationCoefficients:
    """No recalibration: unit IQR scaling, small spread floor, identity beta."""
    return CombinationCoefficients(*IDENTITY_START)


@dataclass(frozen=True)
class EmosCoefficients:
    """One horizon's Gamma calibration: mu and sigma linear in ensemble stats."""

    c0: float
    c1: float
    c2: float
    c3: float
    mean_crps: float = float("nan")
    iterations: int = 0
    fallback: str = ""

    def __post_init__(self) -> None:
        for name in ("c0", "c1", "c2", "c3"):
            if not np.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------

def dress_kernels(
    member_quantiles: Sequence[QuantileSet], coeffs: CombinationCoefficients
) -> KernelParams:
    """Normal kernel per member: mean q50, spread lambda0 + lambda1 * IQR."""
    if not member_quantiles:
        raise ParameterError("need at least one member quantile set")
    mu = np.array([qs.value_at(0.5) for qs in member_quantiles])
    iqr = np.array([qs.iqr for qs in member_quantiles])
    if np.any(iqr < 0.0):
        raise ParameterError("member IQR must be nonnegative")
    return KernelParams(mu=mu, sigma=coeffs.lambda0 + coeffs.lambda1 * iqr)


class PoolCdf(BoundedCdf):
    """Beta-transformed average of Normal kernel CDFs."""

    def __init__(self, kernels: KernelParams, a: float, b: float):
        if a <= 0.0 or b <= 0.0:
            raise ParameterError(f"a and b must be positive, got {a}, {b}")
        self.kernels = kernels
        self.a = float(a)
        self.b = float(b)

    def eval(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = (x[..., None] - self.kernels.mu) / self.kernels.sigma
        pooled = ndtr(z).mean(axis=-1)
        out = betainc(self.a, self.b, pooled)
        return out if out.ndim else float(out)


def pool_cdf(kernels: KernelParams, a: float, b: float) -> PoolCdf:
    """The combined forecast CDF; boundary masses follow from clipping to [0,1]."""
    return PoolCdf(kernels, a, b)


def combined_cdf(
    member_quantiles: Sequence[QuantileSet], coeffs: CombinationCoefficients
) -> PoolCdf:
    return pool_cdf(dress_kernels(member_quantiles, coeffs), coeffs.a, coeffs.b)


def kernel_inputs(
    member_quantiles: Sequence[Sequence[QuantileSet]],
) -> tuple[np.ndarray, np.ndarray]:
    """(n, m) member medians and IQRs from per-pair member quantile sets."""
    mu = np.array([[qs.value_at(0.5) for qs in pair] for pair in member_quantiles])
    iqr = np.array([[qs.iqr for qs in pair] for pair in member_quantiles])
    return mu, iqr


# ---------------------------------------------------------------------------
# coefficient fitting
# ---------------------------------------------------------------------------

def _softplus(t: float) -> float:
    return float(np.logaddexp(0.0, t))


def _softplus_inv(y: float) -> float:
    if y <= 0.0:
        raise ParameterError(f"softplus inverse needs y > 0, got {y}")
    # log(exp(y) - 1), stable for small and large y.
    return float(y + np.log(-np.expm1(-y)))


def _theta_to_coeffs(theta: np.ndarray) -> tuple[float, float, float, float]:
    t = np.clip(theta, -15.0, 15.0)
    return (float(np.exp(t[0])), _softplus(t[1]), float(np.exp(t[2])), float(np.exp(t[3])))


def _coeffs_to_theta(lam0: float, lam1: float, a: float, b: float) -> np.ndarray:
    return np.array([np.log(lam0), _softplus_inv(lam1), np.log(a), np.log(b)])


def _thin_rows(n: int, max_pairs: int | None) -> np.ndarray | None:
    if max_pairs is None or n <= max_pairs:
        return None
    return np.unique(np.linspace(0, n - 1, max_pairs).round().astype(np.intp))


def _check_training(mu: np.ndarray, iqr: np.ndarray, y: np.ndarray, min_pairs: int):
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    iqr = np.ascontiguousarray(iqr, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if mu.ndim != 2 or mu.shape != iqr.shape or y.shape != (mu.shape[0],):
        raise ParameterError(
            f"expected (n, m) medians/IQRs and (n,) observations, got "
            f"{mu.shape}, {iqr.shape}, {y.shape}"
        )
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(iqr)) and np.all(np.isfinite(y))):
        raise ParameterError("training inputs must be finite")
    if np.any(iqr < 0.0):
        raise ParameterError("member IQR must be nonnegative")
    if np.any((y < 0.0) | (y > 1.0)):
        raise ParameterError("observations must lie in [0, 1]")
    if mu.shape[0] < min_pairs:
        raise ParameterError(
            f"need at least {min_pairs} training pairs, got {mu.shape[0]}"
        )
    return mu, iqr, y


def fit_combination(
    mu: np.ndarray,
    iqr: np.ndarray,
    y: np.ndarray,
    *,
    seed: int = 0,
    restarts: int = 5,
    maxiter: int = 500,
    fatol: float = 1e-6,
    inner_grid: int = FIT_GRID,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    max_pairs: int | None = None,
) -> CombinationCoefficients:
    """Fit (lambda0, lambda1, a, b) by minimizing mean pool CRPS.

    The search runs in (log lambda0, softplus^-1 lambda1, log a, log b), so
    every candidate is feasible.  One simplex starts at the identity
    calibration and ``restarts`` more start from jittered copies; the best
    final value wins, and since the first simplex can only improve on its
    start, the result never scores worse on training data than the identity
    calibration.  ``inner_grid`` controls the quadrature used inside the fit;
    report-quality scores should be recomputed on the evaluation grid.
    """
    mu, iqr, y = _check_training(mu, iqr, y, min_pairs)
    keep = _thin_rows(len(y), max_pairs)
    if keep is not None:
        mu, iqr, y = mu[keep], iqr[keep], y[keep]
    if inner_grid < 17:
        raise ParameterError(f"inner_grid too coarse: {inner_grid}")

    kern = get_kernels()

    def objective(theta: np.ndarray) -> float:
        lam0, lam1, a, b = _theta_to_coeffs(theta)
        try:
            lo, hi = beta_transform_tables(a, b)
            crps = kern.pool_crps_batch(mu, iqr, y, lam0, lam1, lo, hi, inner_grid)
        except (FloatingPointError, ValueError):
            return 1e6
        value = float(np.mean(crps))
        return value if np.isfinite(value) else 1e6

    theta0 = _coeffs_to_theta(*IDENTITY_START)
    rng = np.random.default_rng(derive_seed(seed, 0xC0))
    starts = [theta0] + [theta0 + rng.normal(0.0, 0.3, size=4) for _ in range(restarts)]

    best = None
    for start in starts:
        try:
            res = minimize(
                objective,
                start,
                method="Nelder-Mead",
                options={"fatol": fatol, "xatol": 1e-4, "maxiter": maxiter},
            )
        except Exception:  # optimizer blow-up: try the next start
            logger.warning("combination fit: restart failed", exc_info=True)
            continue
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res

    identity_crps = objective(theta0)
    if best is None or best.fun >= 1e6 or best.fun > identity_crps:
        logger.warning("combination fit failed; using identity calibration")
        return replace(
            identity_coefficients(),
            mean_crps=identity_crps if np.isfinite(identity_crps) else float("nan"),
            fallback="identity",
        )
    lam0, lam1, a, b = _theta_to_coeffs(best.x)
    return CombinationCoefficients(
        lambda0=lam0,
        lambda1=lam1,
        a=a,
        b=b,
        mean_crps=float(best.fun),
        iterations=int(best.nit),
    )


def fit_emos_gamma(
    medians: np.ndarray,
    y: np.ndarray,
    *,
    seed: int = 0,
    restarts: int = 5,
    maxiter: int = 500,
    fatol: float = 1e-6,
    min_pairs: int = DEFAULT_MIN_PAIRS,
) -> EmosCoefficients:
    """Fit the Gamma calibration by closed-form CRPS with a feasibility barrier.

    mu = c0 + c1 * member mean, sigma = c2 + c3 * member spread (population
    divisor); shape and rate follow by moment matching.  Candidates where any
    training mu or sigma is nonpositive are pushed back by a penalty that
    grows with the violation.
    """
    medians = np.ascontiguousarray(medians, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if medians.ndim != 2 or y.shape != (medians.shape[0],):
        raise ParameterError(
            f"expected (n, m) member medians and (n,) observations, got "
            f"{medians.shape}, {y.shape}"
        )
    if not (np.all(np.isfinite(medians)) and np.all(np.isfinite(y))):
        raise ParameterError("training inputs must be finite")
    if np.any((y < 0.0) | (y > 1.0)):
        raise ParameterError("observations must lie in [0, 1]")
    if medians.shape[0] < min_pairs:
        raise ParameterError(
            f"need at least {min_pairs} training pairs, got {medians.shape[0]}"
        )

    medians = np.sort(medians, axis=1)  # canonical member order
    ens_mean = medians.mean(axis=1)
    ens_std = medians.std(axis=1)  # population divisor
    y_adj = np.maximum(y, GAMMA_Y_OFFSET)

    def objective(c: np.ndarray) -> float:
        mu = c[0] + c[1] * ens_mean
        sigma = c[2] + c[3] * ens_std
        shortfall = np.minimum(mu - 1e-8, 0.0).sum() + np.minimum(sigma - 1e-8, 0.0).sum()
        if shortfall < 0.0:
            return 1e6 - 1e3 * float(shortfall)
        alpha = mu**2 / sigma**2
        beta = mu / sigma**2
        value = float(np.mean(crps_gamma_closed(alpha, beta, y_adj)))
        return value if np.isfinite(value) else 1e6

    c0 = np.array(EMOS_START)
    rng = np.random.default_rng(derive_seed(seed, 0xE0))
    starts = [c0] + [c0 + rng.normal(0.0, 0.1, size=4) for _ in range(restarts)]

    best = None
    for start in starts:
        if objective(start) >= 1e6:
            continue
        try:
            res = minimize(
                objective,
                start,
                method="Nelder-Mead",
                options={"fatol": fatol, "xatol": 1e-4, "maxiter": maxiter},
            )
        except Exception:
            logger.warning("EMOS fit: restart failed", exc_info=True)
            continue
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res

    if best is None or best.fun >= 1e6:
        logger.warning("EMOS fit failed; using start coefficients")
        return EmosCoefficients(
            *EMOS_START, mean_crps=objective(c0), fallback="identity"
        )
    return EmosCoefficients(
        c0=float(best.x[0]),
        c1=float(best.x[1]),
        c2=float(best.x[2]),
        c3=float(best.x[3]),
        mean_crps=float(best.fun),
        iterations=int(best.nit),
    )


def emos_predict(coeffs: EmosCoefficients, medians: np.ndarray) -> GammaCdf:
    """Gamma forecast CDF from one row of member power medians."""
    medians = np.sort(np.asarray(medians, dtype=np.float64))  # exchangeable members
    if medians.ndim != 1 or medians.size < 1:
        raise ParameterError("member medians must be a nonempty vector")
    mu = coeffs.c0 + coeffs.c1 * float(medians.mean())
    sigma = coeffs.c2 + coeffs.c3 * float(medians.std())
    if sigma <= 0.0:
        logger.warning("EMOS sigma %.3g nonpositive at prediction; flooring", sigma)
        sigma = SIGMA_FLOOR
    if mu <= 0.0:
        logger.warning("EMOS mu %.3g nonpositive at prediction; flooring", mu)
        mu = GAMMA_Y_OFFSET
    return GammaCdf(alpha=mu**2 / sigma**2, beta=mu / sigma**2)


# ---------------------------------------------------------------------------
# per-horizon tables
# ---------------------------------------------------------------------------

def _nearest_fitted(h: int, fitted: Mapping[int, object]) -> int:
    return min(fitted, key=lambda g: (abs(g - h), g))


def _fill_table(
    horizons: Sequence[int],
    fitted: dict[int, object],
    identity: Callable[[], object],
    label: str,
) -> dict:
    table = dict(fitted)
    for h in horizons:
        if h in table:
            continue
        if fitted:
            src = _nearest_fitted(h, fitted)
            logger.warning(
                "%s: horizon %d below the sample floor; reusing horizon %d", label, h, src
            )
            table[h] = replace(fitted[src], fallback=f"neighbor:{src}")
        else:
            logger.warning(
                "%s: no horizon has enough data; horizon %d gets the identity "
                "calibration", label, h,
            )
            table[h] = replace(identity(), fallback="identity")
    return table


def fit_combination_table(
    data: Mapping[int, tuple[np.ndarray, np.ndarray, np.ndarray]],
    *,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    seed: int = 0,
    **fit_kwargs,
) -> dict[int, CombinationCoefficients]:
    """Independent per-horizon fits; short horizons borrow the nearest fit."""
    fitted: dict[int, CombinationCoefficients] = {}
    for h in sorted(data):
        mu, iqr, y = data[h]
        if len(y) >= min_pairs:
            fitted[h] = fit_combination(
                mu, iqr, y, seed=derive_seed(seed, h), min_pairs=min_pairs, **fit_kwargs
            )
    return _fill_table(sorted(data), fitted, identity_coefficients, "combination")


def fit_emos_table(
    data: Mapping[int, tuple[np.ndarray, np.ndarray]],
    *,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    seed: int = 0,
    **fit_kwargs,
) -> dict[int, EmosCoefficients]:
    fitted: dict[int, EmosCoefficients] = {}
    for h in sorted(data):
        medians, y = data[h]
        if len(y) >= min_pairs:
            fitted[h] = fit_emos_gamma(
                medians, y, seed=derive_seed(seed, h), min_pairs=min_pairs, **fit_kwargs
            )
    return _fill_table(
        sorted(data), fitted, lambda: EmosCoefficients(*EMOS_START), "EMOS"
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_COMBO_FIELDS = ("lambda0", "lambda1", "a", "b", "mean_crps", "iterations", "fallback")
_EMOS_FIELDS = ("c0", "c1", "c2", "c3", "mean_crps", "iterations", "fallback")


def _table_to_json(tables, fmt: str, fields) -> dict:
    return {
        "format": fmt,
        "version": TABLE_VERSION,
        "farms": {
            farm: {
                str(h): {f: getattr(c, f) for f in fields}
                for h, c in sorted(table.items())
            }
            for farm, table in tables.items()
        },
    }


def _table_from_json(doc: dict, fmt: str, cls, fields) -> dict:
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise FormatError(f"expected a {fmt} document, got {doc.get('format')!r}")
    if doc.get("version") != TABLE_VERSION:
        raise FormatError(f"unsupported {fmt} version {doc.get('version')!r}")
    out = {}
    for farm, table in doc.get("farms", {}).items():
        out[farm] = {}
        for h, rec in table.items():
            missing = [f for f in fields if f not in rec]
            if missing:
                raise FormatError(f"{fmt}: horizon {h} missing fields {missing}")
            out[farm][int(h)] = cls(**{f: rec[f] for f in fields})
    return out


def combination_table_to_json(
    tables: Mapping[str, Mapping[int, CombinationCoefficients]],
) -> dict:
    """Versioned JSON document keyed by farm then horizon."""
    return _table_to_json(tables, TABLE_FORMAT, _COMBO_FIELDS)


def combination_table_from_json(doc: dict) -> dict[str, dict[int, CombinationCoefficients]]:
    return _table_from_json(doc, TABLE_FORMAT, CombinationCoefficients, _COMBO_FIELDS)


def emos_table_to_json(tables: Mapping[str, Mapping[int, EmosCoefficients]]) -> dict:
    return _table_to_json(tables, EMOS_FORMAT, _EMOS_FIELDS)


def emos_table_from_json(doc: dict) -> dict[str, dict[int, EmosCoefficients]]:
    return _table_from_json(doc, EMOS_FORMAT, EmosCoefficients, _EMOS_FIELDS)


__all__ = [
    "CombinationCoefficients",
    "EmosCoefficients",
    "KernelParams",
    "PoolCdf",
    "combination_table_from_json",
    "combination_table_to_json",
    "combined_cdf",
    "dress_kernels",
    "emos_predict",
    "emos_table_from_json",
    "emos_table_to_json",
    "fit_combination",
    "fit_combination_table",
    "fit_emos_gamma",
    "fit_emos_table",
    "identity_coefficients",
    "kernel_inputs",
    "pool_cdf",
]
