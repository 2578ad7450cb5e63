"""Parity between the numba kernels and the pure-numpy fallbacks.

Trees must match bit for bit (same splits, thresholds, leaf values); the
pooled-CRPS batch must match to float tolerance, and both must agree with a
slow reference built from scipy primitives (exact incomplete beta, trapezoid
with the observation's cell split).
"""

import numpy as np
import pytest
from scipy.special import betainc, ndtr

import windcast._kernels_numpy as knp
from windcast._accel import NUMBA_AVAILABLE, get_kernels, numba_enabled
from windcast.dists import BoundedCdf, beta_transform_tables, crps_numeric
from windcast.qgbt import GbtHyperparams, fit_quantile_gbt

needs_numba = pytest.mark.skipif(not NUMBA_AVAILABLE, reason="numba not installed")

if NUMBA_AVAILABLE:
    import windcast._kernels_numba as knb


def tree_data(n=500, p=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    # Quantize half the columns so ties exercise the boundary handling.
    X[:, ::2] = np.round(X[:, ::2], 1)
    y = np.clip(0.5 + 0.25 * np.tanh(X[:, 0]) + 0.1 * rng.normal(size=n), 0, 1)
    F = np.full(n, np.median(y))
    g01 = (y < F).astype(np.uint8)
    resid = y - F
    return np.ascontiguousarray(X), g01, resid


def pool_data(n=40, m=5, seed=1):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.1, 0.9, size=(n, m))
    iqr = rng.uniform(0.01, 0.2, size=(n, m))
    y = rng.uniform(0.0, 1.0, size=n)
    y[0] = 0.0
    y[1] = 1.0
    y[2] = 0.5  # exactly on a grid point for odd grid sizes
    return mu, iqr, y


class ExactPool(BoundedCdf):
    """Beta-transformed mean of normal kernels via scipy, no tables."""

    def __init__(self, mu, sig, a, b):
        self.mu = mu
        self.sig = sig
        self.a = a
        self.b = b

    def eval(self, x):
        x = np.asarray(x, dtype=np.float64)
        L = ndtr((x[..., None] - self.mu) / self.sig).mean(axis=-1)
        out = betainc(self.a, self.b, L)
        return out if out.ndim else float(out)


def reference_pool_crps(mu, iqr, y, lam0, lam1, a, b, grid_n):
    """Slow oracle: exact transform fed through the canonical quadrature."""
    sig = lam0 + lam1 * iqr
    return np.array(
        [
            crps_numeric(ExactPool(mu[i], sig[i], a, b), y[i], n_grid=grid_n)
            for i in range(len(y))
        ]
    )


class TestSelection:
    def test_env_flag_selects_numpy(self, monkeypatch):
        monkeypatch.setenv("WINDCAST_NO_NUMBA", "1")
        assert not numba_enabled()
        assert get_kernels() is knp

    @needs_numba
    def test_default_selects_numba(self, monkeypatch):
        monkeypatch.delenv("WINDCAST_NO_NUMBA", raising=False)
        assert numba_enabled()
        assert get_kernels() is knb


class TestFeatureSubsets:
    def test_deterministic_and_within_range(self):
        s1 = knp.feature_subset(24, 5, seed=123, heap_id=7)
        s2 = knp.feature_subset(24, 5, seed=123, heap_id=7)
        np.testing.assert_array_equal(s1, s2)
        assert len(set(s1.tolist())) == 5
        assert s1.min() >= 0 and s1.max() < 24

    def test_all_features_when_subset_covers(self):
        np.testing.assert_array_equal(
            knp.feature_subset(4, 4, seed=0, heap_id=1), np.arange(4)
        )

    @needs_numba
    def test_numba_matches_numpy(self):
        pool = np.empty(24, dtype=np.int64)
        for heap_id in (1, 2, 3, 9, 177):
            n = knb._feature_subset(24, 5, 99, heap_id, pool)
            np.testing.assert_array_equal(
                pool[:n], knp.feature_subset(24, 5, seed=99, heap_id=heap_id)
            )


@needs_numba
class TestTreeParity:
    @pytest.mark.parametrize("tau", [0.05, 0.5, 0.9])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_grow_tree_bit_identical(self, tau, seed):
        X, g01, resid = tree_data(seed=seed)
        args = (tau, 6, 10, 4, 3, 12345 + seed)
        out_np = knp.grow_tree(X, g01, resid, *args)
        out_nb = knb.grow_tree(X, g01, resid, *args)
        n_np, n_nb = out_np[5], out_nb[5]
        assert n_np == n_nb
        for a, b in zip(out_np[:5], out_nb[:5]):
            np.testing.assert_array_equal(a[:n_np], b[:n_nb])

    def test_apply_tree_identical(self):
        X, g01, resid = tree_data(seed=3)
        out = knp.grow_tree(X, g01, resid, 0.5, 5, 8, 4, 3, 42)
        Xq = np.ascontiguousarray(np.random.default_rng(5).normal(size=(200, X.shape[1])))
        p_np = knp.apply_tree(*out[:5], Xq)
        p_nb = knb.apply_tree(*out[:5], Xq)
        np.testing.assert_array_equal(p_np, p_nb)

    def test_full_fit_identical_across_paths(self, monkeypatch):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(400, 4))
        y = np.clip(0.4 + 0.2 * X[:, 1] + 0.05 * rng.normal(size=400), 0, 1)
        hp = GbtHyperparams(n_estimators=12, min_samples_leaf=4, min_samples_split=8)
        grid = np.ascontiguousarray(rng.normal(size=(100, 4)))

        monkeypatch.setenv("WINDCAST_NO_NUMBA", "1")
        pred_np = fit_quantile_gbt(X, y, 0.25, hp, seed=4).predict(grid)
        monkeypatch.delenv("WINDCAST_NO_NUMBA")
        pred_nb = fit_quantile_gbt(X, y, 0.25, hp, seed=4).predict(grid)
        np.testing.assert_array_equal(pred_np, pred_nb)


class TestPoolCrps:
    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.5, 0.7), (0.4, 3.0)])
    def test_numpy_matches_reference(self, a, b):
        mu, iqr, y = pool_data()
        lo, hi = beta_transform_tables(a, b)
        got = knp.pool_crps_batch(mu, iqr, y, 0.05, 1.0, lo, hi, 201)
        want = reference_pool_crps(mu, iqr, y, 0.05, 1.0, a, b, 201)
        np.testing.assert_allclose(got, want, rtol=0, atol=5e-6)

    @needs_numba
    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.5, 0.7), (0.4, 3.0)])
    def test_numba_matches_numpy(self, a, b):
        mu, iqr, y = pool_data(seed=9)
        lo, hi = beta_transform_tables(a, b)
        got_nb = knb.pool_crps_batch(mu, iqr, y, 0.03, 1.2, lo, hi, 129)
        got_np = knp.pool_crps_batch(mu, iqr, y, 0.03, 1.2, lo, hi, 129)
        np.testing.assert_allclose(got_nb, got_np, rtol=0, atol=1e-9)

    def test_identity_transform_is_mean_cdf_pool(self):
        # a = b = 1 makes the transform the identity; the table path is exact
        # there because linear interpolation reproduces a linear function.
        mu, iqr, y = pool_data(seed=13)
        lo, hi = beta_transform_tables(1.0, 1.0)
        got = knp.pool_crps_batch(mu, iqr, y, 0.05, 1.0, lo, hi, 401)
        want = reference_pool_crps(mu, iqr, y, 0.05, 1.0, 1.0, 1.0, 401)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)
