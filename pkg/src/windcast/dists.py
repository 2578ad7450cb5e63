"""Distribution toolkit: special functions, GPD tails, monotone quantile
interpolation, bounded CDFs with boundary masses, inversion, and CRPS.

Forecast CDFs live on [0, 1] after unit-interval clipping: probability below
0 folds into a point mass ``omega0`` and probability above 1 into ``omega1``.
``BoundedCdf.eval`` returns the continuous interior value (so ``eval(0)`` is
``omega0`` and ``eval(1)`` is ``1 - omega1``); the mass at 1 itself enters
scoring only through quantile inversion, never the CRPS integrand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc, betaln, gammainc, ndtr

from windcast.core import ParameterError

XI_SWITCH = 1e-10
XI_CLAMP = 0.95
GPD_SAMPLE_FLOOR = 30
CRPS_GRID = 2001
QUANTILE_CACHE = 1001
QUANTILE_TOL = 1e-9


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def beta_cdf(z, a: float, b: float):
    """Regularized incomplete beta I_{a,b}(z), clamped to z in [0,1]."""
    if a <= 0 or b <= 0:
        raise ParameterError(f"beta parameters must be positive, got a={a}, b={b}")
    return betainc(a, b, np.clip(z, 0.0, 1.0))


def gamma_cdf(x, alpha: float, beta: float):
    """Gamma CDF with shape alpha and rate beta (mean alpha/beta)."""
    if np.any(np.asarray(alpha) <= 0) or np.any(np.asarray(beta) <= 0):
        raise ParameterError(f"gamma parameters must be positive, got {alpha}, {beta}")
    x = np.asarray(x, dtype=np.float64)
    return gammainc(alpha, beta * np.maximum(x, 0.0))


def normal_cdf(x, mu=0.0, sigma=1.0):
    """Standard normal CDF evaluated at (x - mu)/sigma."""
    if np.any(np.asarray(sigma) <= 0):
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return ndtr((np.asarray(x, dtype=np.float64) - mu) / sigma)


BETA_TABLE_POINTS = 8193


def beta_transform_tables(
    a: float, b: float, n_points: int = BETA_TABLE_POINTS
) -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables for I_{a,b} on a cubically graded abscissa.

    Entry j holds the value at u = 0.5*(j/(n-1))**3; the first table covers
    I_{a,b} on [0, 0.5], the second I_{b,a}, used through the reflection
    I_{a,b}(u) = 1 - I_{b,a}(1-u) for the upper half.  Cubic grading keeps
    linear interpolation accurate even when a or b is below 1 and the
    transform has infinite slope at an endpoint.
    """
    if a <= 0 or b <= 0:
        raise ParameterError(f"beta parameters must be positive, got a={a}, b={b}")
    if n_points < 2:
        raise ParameterError(f"need at least 2 table points, got {n_points}")
    u = 0.5 * np.linspace(0.0, 1.0, n_points) ** 3
    return betainc(a, b, u), betainc(b, a, u)


# ---------------------------------------------------------------------------
# monotone cubic interpolation (Fritsch-Butland tangents)
# ---------------------------------------------------------------------------

def _edge_slope(h0: float, h1: float, s0: float, s1: float) -> float:
    # Non-centered three-point estimate, projected to preserve monotonicity.
    d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1)
    if np.sign(d) != np.sign(s0):
        return 0.0
    if np.sign(s0) != np.sign(s1) and abs(d) > 3.0 * abs(s0):
        return 3.0 * s0
    return d


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Shape-preserving tangents via the Fritsch-Butland harmonic mean."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ParameterError("at least two knots required")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ParameterError("knot abscissae must be strictly increasing")
    s = np.diff(y) / h
    m = np.zeros(n)
    if n == 2:
        m[:] = s[0]
        return m
    # Interior: weighted harmonic mean where secants agree in sign, else 0.
    s_l, s_r = s[:-1], s[1:]
    h_l, h_r = h[:-1], h[1:]
    w1 = 2.0 * h_r + h_l
    w2 = h_r + 2.0 * h_l
    same_sign = (s_l * s_r) > 0
    interior = np.zeros(n - 2)
    if np.any(same_sign):
        num = w1[same_sign] + w2[same_sign]
        den = w1[same_sign] / s_l[same_sign] + w2[same_sign] / s_r[same_sign]
        interior[same_sign] = num / den
    m[1:-1] = interior
    m[0] = _edge_slope(h[0], h[1], s[0], s[1])
    m[-1] = _edge_slope(h[-1], h[-2], s[-1], s[-2])
    return m


@dataclass(frozen=True)
class MonotoneCubic:
    """Piecewise cubic Hermite interpolant with shape-preserving slopes."""

    x: np.ndarray
    y: np.ndarray
    slopes: np.ndarray

    @classmethod
    def fit(cls, x, y) -> "MonotoneCubic":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return cls(x=x, y=y, slopes=pchip_slopes(x, y))

    def __call__(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        i = np.clip(np.searchsorted(self.x, q, side="right") - 1, 0, len(self.x) - 2)
        h = self.x[i + 1] - self.x[i]
        t = (q - self.x[i]) / h
        t2 = t * t
        t3 = t2 * t
        out = (
            self.y[i] * (2.0 * t3 - 3.0 * t2 + 1.0)
            + h * self.slopes[i] * (t3 - 2.0 * t2 + t)
            + self.y[i + 1] * (-2.0 * t3 + 3.0 * t2)
            + h * self.slopes[i + 1] * (t3 - t2)
        )
        return np.clip(out, np.minimum(self.y[i], self.y[i + 1]), np.maximum(self.y[i], self.y[i + 1]))


# ---------------------------------------------------------------------------
# generalized Pareto tails
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GpdTail:
    """GPD model for exceedances beyond a threshold quantile."""

    psi: float
    xi: float
    threshold_quantile: float
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.psi <= 0:
            raise ParameterError(f"GPD scale must be positive, got {self.psi}")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ParameterError(
                f"threshold quantile must lie in (0,1), got {self.threshold_quantile}"
            )


def gpd_cdf(z, tail: GpdTail):
    """GPD CDF of exceedances; exponential limit for |xi| below 1e-10."""
    z = np.asarray(z, dtype=np.float64)
    u = np.maximum(z - tail.eta, 0.0)
    if abs(tail.xi) < XI_SWITCH:
        out = -np.expm1(-u / tail.psi)
    else:
        # log1p form keeps precision for small xi; beyond a bounded tail's
        # endpoint (xi < 0) the CDF saturates at 1.
        arg = np.maximum(tail.xi * u / tail.psi, -1.0)
        with np.errstate(divide="ignore"):
            out = 1.0 - np.exp(-np.log1p(arg) / tail.xi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GpdFitResult:
    """Fitted tail plus estimation diagnostics."""

    tail: GpdTail
    loglik: float
    n_iterations: int
    n_exceedances: int
    fallback: bool


def _gpd_nll(params: np.ndarray, z: np.ndarray) -> float:
    log_psi = params[0]
    xi = float(np.clip(params[1], -XI_CLAMP, XI_CLAMP))
    psi = np.exp(log_psi)
    n = len(z)
    if abs(xi) < XI_SWITCH:
        return n * log_psi + float(np.sum(z)) / psi
    w = xi * z / psi
    if np.min(w) <= -1.0:
        return 1e12 + abs(np.min(w))
    return n * log_psi + (1.0 + 1.0 / xi) * float(np.sum(np.log1p(w)))


def fit_gpd_mle(
    exceedances,
    threshold_quantile: float = 0.95,
    floor: int = GPD_SAMPLE_FLOOR,
    fit_location: bool = False,
) -> GpdFitResult:
    """Maximum-likelihood GPD fit over (log psi, xi), xi in [-0.95, 0.95].

    Below the sample floor falls back to an exponential fit (xi = 0,
    psi = mean exceedance) with the fallback flag set.  ``fit_location`` adds
    a nonnegative location shift (rarely wanted; default keeps eta = 0).
    """
    z = np.asarray(exceedances, dtype=np.float64)
    if z.size and np.min(z) < 0:
        raise ParameterError("exceedances must be nonnegative")
    eta = 0.0
    if fit_location and z.size:
        eta = float(np.min(z)) * 0.999
        z = z - eta
    if len(z) < max(floor, 2):
        psi = float(np.mean(z)) if len(z) else 1e-6
        psi = max(psi, 1e-9)
        tail = GpdTail(psi=psi, xi=0.0, threshold_quantile=threshold_quantile, eta=eta)
        ll = -_gpd_nll(np.array([np.log(psi), 0.0]), z) if len(z) else 0.0
        return GpdFitResult(tail, float(ll), 0, len(z), fallback=True)

    mean = float(np.mean(z))
    var = float(np.var(z))
    # Method-of-moments start, plus an exponential start for robustness.
    if var > 0:
        xi0 = 0.5 * (1.0 - mean * mean / var)
        psi0 = 0.5 * mean * (mean * mean / var + 1.0)
    else:
        xi0, psi0 = 0.0, max(mean, 1e-9)
    xi0 = float(np.clip(xi0, -0.9, 0.9))
    psi0 = max(psi0, 1e-9)
    starts = [
        np.array([np.log(psi0), xi0]),
        np.array([np.log(max(mean, 1e-9)), 0.0]),
    ]
    best = None
    total_iter = 0
    for x0 in starts:
        res = minimize(
            _gpd_nll,
            x0,
            args=(z,),
            method="Nelder-Mead",
            options={"maxiter": 500, "xatol": 1e-8, "fatol": 1e-10},
        )
        total_iter += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    psi = float(np.exp(best.x[0]))
    xi = float(np.clip(best.x[1], -XI_CLAMP, XI_CLAMP))
    tail = GpdTail(psi=psi, xi=xi, threshold_quantile=threshold_quantile, eta=eta)
    return GpdFitResult(tail, -float(best.fun), total_iter, len(z), fallback=False)


# ---------------------------------------------------------------------------
# bounded CDFs
# ---------------------------------------------------------------------------

class BoundedCdf:
    """Forecast CDF on [0, 1] with point masses at the boundaries."""

    def eval(self, x):
        """Continuous CDF value at x in [0, 1] (vectorized)."""
        raise NotImplementedError

    @property
    def omega0(self) -> float:
        return float(self.eval(0.0))

    @property
    def omega1(self) -> float:
        # Right-continuity hides a point mass sitting exactly at 1, so take
        # the left limit there.
        return 1.0 - float(self.eval(np.nextafter(1.0, 0.0)))

    def _cache(self) -> tuple[np.ndarray, np.ndarray]:
        cached = getattr(self, "_grid_cache", None)
        if cached is None:
            xs = np.linspace(0.0, 1.0, QUANTILE_CACHE)
            cached = (xs, np.asarray(self.eval(xs), dtype=np.float64))
            object.__setattr__(self, "_grid_cache", cached)
        return cached


class StepCdf(BoundedCdf):
    """Degenerate forecast: all mass at a single value."""

    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise ParameterError(f"step location must lie in [0,1], got {value}")
        self.value = float(value)

    def eval(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.where(x >= self.value, 1.0, 0.0)
        return out if out.ndim else float(out)


class GammaCdf(BoundedCdf):
    """Gamma(alpha, rate beta) restricted to [0, 1]; excess mass folds to 1."""

    def __init__(self, alpha: float, beta: float):
        if alpha <= 0 or beta <= 0:
            raise ParameterError(f"gamma parameters must be positive: {alpha}, {beta}")
        self.alpha = float(alpha)
        self.beta = float(beta)

    def eval(self, x):
        return gamma_cdf(np.clip(x, 0.0, 1.0), self.alpha, self.beta)


class InterpolatedCdf(BoundedCdf):
    """Monotone cubic interior through quantile knots with GPD tail segments.

    Below the lowest knot the CDF is tau_lo * (1 - GPD(q_lo - x)); above the
    highest knot it is tau_hi + (1 - tau_hi) * GPD(x - q_hi), where tau_lo and
    tau_hi are the tails' threshold quantiles.  Missing tails degenerate to
    attach levels (0, 1), i.e. no mass beyond the outer knots.  Duplicate knot
    values collapse to the highest tau (the CDF jumps there).
    """

    def __init__(
        self,
        values,
        taus,
        lower_tail: GpdTail | None = None,
        upper_tail: GpdTail | None = None,
    ):
        values = np.asarray(values, dtype=np.float64)
        taus = np.asarray(taus, dtype=np.float64)
        if values.shape != taus.shape or values.ndim != 1 or len(values) == 0:
            raise ParameterError("knot values and levels must be equal-length 1-d arrays")
        if np.any(np.diff(values) < 0) or np.any(np.diff(taus) <= 0):
            raise ParameterError("knots must be nondecreasing in value, increasing in tau")
        if lower_tail is not None and abs(lower_tail.threshold_quantile - taus[0]) > 1e-9:
            raise ParameterError(
                f"lower tail threshold {lower_tail.threshold_quantile} does not match "
                f"first knot level {taus[0]}"
            )
        if upper_tail is not None and abs(upper_tail.threshold_quantile - taus[-1]) > 1e-9:
            raise ParameterError(
                f"upper tail threshold {upper_tail.threshold_quantile} does not match "
                f"last knot level {taus[-1]}"
            )
        # Collapse duplicate values, keeping the highest tau at each.
        keep = np.concatenate([values[1:] - values[:-1] > 1e-12, [True]])
        self.knot_values = values[keep]
        self.knot_taus = taus[keep]
        self.lower_tail = lower_tail
        self.upper_tail = upper_tail
        self.tau_lo = lower_tail.threshold_quantile if lower_tail is not None else 0.0
        self.tau_hi = upper_tail.threshold_quantile if upper_tail is not None else 1.0
        self._interp = (
            MonotoneCubic.fit(self.knot_values, self.knot_taus)
            if len(self.knot_values) >= 2
            else None
        )

    def eval(self, x):
        x = np.asarray(x, dtype=np.float64)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        lo_v = self.knot_values[0]
        hi_v = self.knot_values[-1]
        out = np.empty_like(x)

        below = x < lo_v
        if np.any(below):
            if self.lower_tail is None:
                out[below] = 0.0
            else:
                out[below] = self.tau_lo * (1.0 - gpd_cdf(lo_v - x[below], self.lower_tail))
        above = x > hi_v
        if np.any(above):
            if self.upper_tail is None:
                out[above] = 1.0
            else:
                out[above] = self.tau_hi + (1.0 - self.tau_hi) * gpd_cdf(
                    x[above] - hi_v, self.upper_tail
                )
        inside = ~(below | above)
        if np.any(inside):
            if self._interp is None:
                # Single knot: right-continuous jump through its tau span.
                out[inside] = self.tau_hi
            else:
                out[inside] = self._interp(x[inside])
        return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# quantile inversion and CRPS
# ---------------------------------------------------------------------------

def cdf_quantile(F: BoundedCdf, p):
    """Generalized inverse inf{x : F(x) >= p} for p in (0, 1).

    Returns 0 inside the lower boundary mass and 1 inside the upper one;
    elsewhere bisection on a 1001-point cache refined to 1e-9.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    scalar = p_arr.ndim == 0
    p_arr = np.atleast_1d(p_arr)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ParameterError("probability levels must lie strictly inside (0,1)")
    xs, fs = F._cache()
    out = np.empty_like(p_arr)
    w0 = fs[0]
    w1_compl = fs[-1]
    at_zero = p_arr <= w0
    at_one = p_arr >= w1_compl
    out[at_zero] = 0.0
    out[at_one] = 1.0
    active = ~(at_zero | at_one)
    if np.any(active):
        pa = p_arr[active]
        # fs is nondecreasing; find the bracketing cache cell.
        hi_idx = np.searchsorted(fs, pa, side="left")
        hi_idx = np.clip(hi_idx, 1, len(xs) - 1)
        lo = xs[hi_idx - 1]
        hi = xs[hi_idx]
        for _ in range(32):
            mid = 0.5 * (lo + hi)
            fm = np.asarray(F.eval(mid), dtype=np.float64)
            go_left = fm >= pa
            hi = np.where(go_left, mid, hi)
            lo = np.where(go_left, lo, mid)
            if np.max(hi - lo) < QUANTILE_TOL:
                break
        out[active] = hi
    return float(out[0]) if scalar else out


def crps_numeric(F: BoundedCdf, y: float, n_grid: int = CRPS_GRID) -> float:
    """CRPS of a bounded CDF against observation y by trapezoid quadrature.

    Integrates (F(x) - H(x - y))^2 over [0, 1] on a uniform grid with y
    inserted as a breakpoint, so the Heaviside jump never crosses a cell.
    """
    if not 0.0 <= y <= 1.0:
        raise ParameterError(f"observation must lie in [0,1], got {y}")
    xs = np.linspace(0.0, 1.0, n_grid)
    fx = np.asarray(F.eval(xs), dtype=np.float64)
    # Left of y the integrand uses the left limit of F, so a jump exactly at
    # the observation scores zero.
    fy_left = float(F.eval(np.nextafter(y, -np.inf)))
    fy_right = float(F.eval(y))
    i = int(np.searchsorted(xs, y))
    left_x = np.concatenate([xs[:i], [y]])
    left_f = np.concatenate([fx[:i], [fy_left]])
    right_x = np.concatenate([[y], xs[i:]])
    right_f = np.concatenate([[fy_right], fx[i:]])
    below = float(np.trapezoid(left_f**2, left_x)) if len(left_x) > 1 else 0.0
    above = float(np.trapezoid((right_f - 1.0) ** 2, right_x)) if len(right_x) > 1 else 0.0
    return below + above


def crps_gamma_closed(alpha, beta, y):
    """Closed-form CRPS of a Gamma(shape alpha, rate beta) forecast."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ParameterError("gamma parameters must be positive")
    if np.any(y < 0):
        raise ParameterError("observation must be nonnegative")
    f1 = gammainc(alpha, beta * y)
    f2 = gammainc(alpha + 1.0, beta * y)
    bfun = np.exp(betaln(alpha + 0.5, 0.5))
    out = y * (2.0 * f1 - 1.0) - (alpha / beta) * (2.0 * f2 - 1.0) - (
        alpha / (beta * np.pi)
    ) * bfun
    return out if out.ndim else float(out)


def quantiles_to_cdf(
    values,
    taus,
    lower_tail: GpdTail | None,
    upper_tail: GpdTail | None,
) -> InterpolatedCdf:
    """Assemble the interpolant-plus-tails CDF for a monotone quantile set."""
    return InterpolatedCdf(values, taus, lower_tail=lower_tail, upper_tail=upper_tail)
