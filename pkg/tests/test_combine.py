"""Combination-stage tests: dressing arithmetic, pool properties, fits."""

import numpy as np
import pytest
from scipy.special import betainc, ndtr

from windcast._accel import get_kernels
from windcast.combine import (
    CombinationCoefficients,
    EmosCoefficients,
    KernelParams,
    combination_table_from_json,
    combination_table_to_json,
    dress_kernels,
    emos_predict,
    emos_table_from_json,
    emos_table_to_json,
    fit_combination,
    fit_combination_table,
    fit_emos_gamma,
    fit_emos_table,
    identity_coefficients,
    kernel_inputs,
    pool_cdf,
)
from windcast.core import (
    FormatError,
    ParameterError,
    QuantileSet,
    kernel_quantile_grid,
)
from windcast.dists import (
    beta_transform_tables,
    cdf_quantile,
    crps_gamma_closed,
    normal_cdf,
)


def qset(q25, q50, q75):
    return QuantileSet(grid=kernel_quantile_grid(), values=(q25, q50, q75))


def coeffs(lam0=0.05, lam1=1.0, a=1.0, b=1.0):
    return CombinationCoefficients(lambda0=lam0, lambda1=lam1, a=a, b=b)


# ---------------------------------------------------------------------------
# simulation helpers (shared by the self-consistency tests)
# ---------------------------------------------------------------------------

def pool_eval_batch(x, mu, iqr, lam0, lam1, a, b):
    sigma = lam0 + lam1 * iqr
    u = ndtr((x[:, None] - mu) / sigma).mean(axis=1)
    return betainc(a, b, u)


def sample_pool(rng, n, m, lam0, lam1, a, b):
    """Draw (medians, IQRs, y) with y distributed exactly as the pool says."""
    centers = rng.uniform(0.15, 0.85, size=n)
    mu = centers[:, None] + rng.normal(0.0, 0.05, size=(n, m))
    iqr = rng.uniform(0.05, 0.25, size=(n, m))
    u = rng.uniform(size=n)
    lo = np.zeros(n)
    hi = np.ones(n)
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        below = pool_eval_batch(mid, mu, iqr, lam0, lam1, a, b) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return mu, iqr, 0.5 * (lo + hi)


def batch_crps(mu, iqr, y, lam0, lam1, a, b, grid=513):
    lo, hi = beta_transform_tables(a, b)
    return float(
        get_kernels().pool_crps_batch(mu, iqr, y, lam0, lam1, lo, hi, grid).mean()
    )


# ---------------------------------------------------------------------------
# dressing
# ---------------------------------------------------------------------------

def test_dress_sigma_is_linear_in_iqr():
    kp = dress_kernels([qset(0.3, 0.4, 0.5)], coeffs(lam0=0.02, lam1=1.0))
    assert kp.sigma[0] == pytest.approx(0.22)
    assert kp.mu[0] == pytest.approx(0.4)


def test_dress_zero_slope_gives_constant_sigma():
    members = [qset(0.1, 0.2, 0.3), qset(0.2, 0.5, 0.9), qset(0.0, 0.0, 0.0)]
    kp = dress_kernels(members, coeffs(lam0=0.07, lam1=0.0))
    assert np.all(kp.sigma == 0.07)


def test_dress_median_becomes_kernel_mean():
    kp = dress_kernels([qset(0.3, 0.4, 0.6)], coeffs())
    assert kp.mu[0] == 0.4


def test_dress_rejects_empty():
    with pytest.raises(ParameterError):
        dress_kernels([], coeffs())


def test_coefficient_constraints_enforced():
    with pytest.raises(ParameterError):
        CombinationCoefficients(lambda0=0.0, lambda1=1.0, a=1.0, b=1.0)
    with pytest.raises(ParameterError):
        CombinationCoefficients(lambda0=0.05, lambda1=-0.1, a=1.0, b=1.0)
    with pytest.raises(ParameterError):
        CombinationCoefficients(lambda0=0.05, lambda1=1.0, a=0.0, b=1.0)
    with pytest.raises(ParameterError):
        KernelParams(mu=np.array([0.5]), sigma=np.array([0.0]))


def test_kernel_inputs_stack_pairs():
    pairs = [
        [qset(0.1, 0.2, 0.4), qset(0.3, 0.5, 0.6)],
        [qset(0.2, 0.3, 0.5), qset(0.4, 0.6, 0.9)],
    ]
    mu, iqr = kernel_inputs(pairs)
    assert mu.shape == (2, 2) and iqr.shape == (2, 2)
    assert mu[1, 1] == 0.6
    assert iqr[0, 0] == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_identity_transform_equals_mean_of_kernel_cdfs():
    rng = np.random.default_rng(0)
    kp = KernelParams(mu=rng.uniform(0.2, 0.8, 7), sigma=rng.uniform(0.05, 0.3, 7))
    F = pool_cdf(kp, 1.0, 1.0)
    xs = np.linspace(0.0, 1.0, 101)
    manual = np.mean([normal_cdf(xs, m, s) for m, s in zip(kp.mu, kp.sigma)], axis=0)
    np.testing.assert_allclose(F.eval(xs), manual, atol=1e-12)


def test_single_kernel_identity_pool_is_normal():
    F = pool_cdf(KernelParams(mu=np.array([0.4]), sigma=np.array([0.12])), 1.0, 1.0)
    xs = np.linspace(0.0, 1.0, 41)
    np.testing.assert_allclose(F.eval(xs), normal_cdf(xs, 0.4, 0.12), atol=1e-12)
    assert F.omega0 == pytest.approx(normal_cdf(0.0, 0.4, 0.12), abs=1e-12)
    assert F.omega1 == pytest.approx(1.0 - normal_cdf(1.0, 0.4, 0.12), abs=1e-12)


def test_symmetric_kernels_keep_median_under_symmetric_beta():
    kp = KernelParams(mu=np.array([0.3, 0.7]), sigma=np.array([0.1, 0.1]))
    F = pool_cdf(kp, 2.0, 2.0)
    assert F.eval(0.5) == pytest.approx(0.5, abs=1e-12)


def test_pool_is_nondecreasing_for_random_shapes():
    rng = np.random.default_rng(1)
    xs = np.linspace(0.0, 1.0, 301)
    for _ in range(10):
        kp = KernelParams(
            mu=rng.uniform(-0.2, 1.2, 5), sigma=rng.uniform(0.02, 0.4, 5)
        )
        a, b = rng.uniform(0.3, 3.0, 2)
        vals = pool_cdf(kp, a, b).eval(xs)
        assert np.all(np.diff(vals) >= -1e-15)
        assert np.all((vals >= 0.0) & (vals <= 1.0))


def test_pool_member_permutation_invariance():
    rng = np.random.default_rng(2)
    mu = rng.uniform(0.2, 0.8, 6)
    sigma = rng.uniform(0.05, 0.2, 6)
    perm = rng.permutation(6)
    xs = np.linspace(0.0, 1.0, 64)
    a_vals = pool_cdf(KernelParams(mu, sigma), 1.4, 0.8).eval(xs)
    b_vals = pool_cdf(KernelParams(mu[perm], sigma[perm]), 1.4, 0.8).eval(xs)
    assert np.array_equal(a_vals, b_vals)


def test_pool_rejects_bad_shape_parameters():
    kp = KernelParams(mu=np.array([0.5]), sigma=np.array([0.1]))
    with pytest.raises(ParameterError):
        pool_cdf(kp, 0.0, 1.0)
    with pytest.raises(ParameterError):
        pool_cdf(kp, 1.0, -2.0)


# ---------------------------------------------------------------------------
# combination fitting
# ---------------------------------------------------------------------------

def test_fit_validates_inputs():
    rng = np.random.default_rng(3)
    mu = rng.uniform(0.2, 0.8, (60, 4))
    iqr = rng.uniform(0.05, 0.2, (60, 4))
    y = rng.uniform(size=60)
    with pytest.raises(ParameterError, match="at least 50"):
        fit_combination(mu[:20], iqr[:20], y[:20])
    with pytest.raises(ParameterError):
        fit_combination(mu, iqr[:, :3], y)
    with pytest.raises(ParameterError, match=r"\[0, 1\]"):
        fit_combination(mu, iqr, y + 2.0)
    with pytest.raises(ParameterError, match="nonnegative"):
        fit_combination(mu, -iqr, y)


def test_fit_underdispersed_widens_kernels_and_beats_identity():
    improved = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        n, m = 400, 6
        centers = rng.uniform(0.25, 0.75, size=n)
        mu = centers[:, None] + rng.normal(0.0, 0.03, size=(n, m))
        iqr = np.full((n, m), 0.08)
        # True scatter is about twice the identity-dressed kernel spread.
        y = np.clip(centers + rng.normal(0.0, 0.26, size=n), 0.0, 1.0)
        fit = fit_combination(
            mu, iqr, y, seed=seed, restarts=2, maxiter=300, inner_grid=65
        )
        identity = identity_coefficients()
        sigma_fit = fit.lambda0 + fit.lambda1 * iqr.mean()
        sigma_id = identity.lambda0 + identity.lambda1 * iqr.mean()
        id_crps = batch_crps(mu, iqr, y, identity.lambda0, identity.lambda1, 1.0, 1.0)
        fit_crps = batch_crps(mu, iqr, y, fit.lambda0, fit.lambda1, fit.a, fit.b)
        assert fit_crps <= id_crps + 1e-9
        if sigma_fit > sigma_id:
            improved += 1
    assert improved >= 4


def test_fit_never_worse_than_identity_even_on_junk():
    rng = np.random.default_rng(4)
    n, m = 80, 3
    mu = rng.uniform(0.0, 1.0, (n, m))
    iqr = rng.uniform(0.0, 0.5, (n, m))
    y = rng.uniform(size=n)
    fit = fit_combination(mu, iqr, y, seed=0, restarts=1, maxiter=120, inner_grid=33)
    identity = identity_coefficients()
    id_crps = batch_crps(mu, iqr, y, identity.lambda0, identity.lambda1, 1.0, 1.0, grid=33)
    fit_crps = batch_crps(mu, iqr, y, fit.lambda0, fit.lambda1, fit.a, fit.b, grid=33)
    assert fit_crps <= id_crps + 1e-9
    assert fit.lambda0 > 0 and fit.lambda1 >= 0 and fit.a > 0 and fit.b > 0


def test_fit_is_deterministic_for_fixed_seed():
    rng = np.random.default_rng(5)
    n, m = 120, 4
    mu = rng.uniform(0.2, 0.8, (n, m))
    iqr = rng.uniform(0.05, 0.2, (n, m))
    y = np.clip(mu.mean(axis=1) + rng.normal(0, 0.1, n), 0, 1)
    a = fit_combination(mu, iqr, y, seed=9, restarts=1, maxiter=60, inner_grid=33)
    b = fit_combination(mu, iqr, y, seed=9, restarts=1, maxiter=60, inner_grid=33)
    assert (a.lambda0, a.lambda1, a.a, a.b) == (b.lambda0, b.lambda1, b.a, b.b)


@pytest.mark.slow
def test_fit_recovers_generating_crps():
    rng = np.random.default_rng(42)
    true = (0.03, 0.8, 1.3, 0.9)
    mu, iqr, y = sample_pool(rng, 5000, 8, *true)
    mu_t, iqr_t, y_t = sample_pool(rng, 2000, 8, *true)
    fit = fit_combination(
        mu, iqr, y, seed=0, restarts=2, maxiter=300, inner_grid=65, max_pairs=1500
    )
    crps_true = batch_crps(mu_t, iqr_t, y_t, *true)
    crps_fit = batch_crps(mu_t, iqr_t, y_t, fit.lambda0, fit.lambda1, fit.a, fit.b)
    assert crps_fit <= crps_true * 1.01


@pytest.mark.slow
def test_fit_finds_identity_beta_on_calibrated_pool():
    # Member sampling draws y exactly from the equally weighted pool, so the
    # generating beta transform is the identity.  The (a, b) surface is flat
    # near its optimum; locating it within +-0.15 needs a five-digit sample.
    rng = np.random.default_rng(8)
    n, m, lam0, lam1 = 12000, 6, 0.03, 0.8
    mu = rng.uniform(0.15, 0.85, size=(n, m))
    iqr = rng.uniform(0.02, 0.2, size=(n, m))
    member = rng.integers(0, m, size=n)
    y = rng.normal(
        mu[np.arange(n), member], lam0 + lam1 * iqr[np.arange(n), member]
    )
    keep = (y >= 0.0) & (y <= 1.0)
    fit = fit_combination(
        mu[keep], iqr[keep], y[keep],
        seed=0, restarts=2, maxiter=400, inner_grid=65,
    )
    assert abs(fit.a - 1.0) <= 0.15
    assert abs(fit.b - 1.0) <= 0.15


# ---------------------------------------------------------------------------
# EMOS
# ---------------------------------------------------------------------------

def test_emos_moment_matching_arithmetic():
    # mu 0.5, sigma 0.25 -> shape 4, rate 8.
    c = EmosCoefficients(c0=0.0, c1=1.0, c2=0.25, c3=0.0)
    F = emos_predict(c, np.array([0.5, 0.5, 0.5]))
    assert F.alpha == pytest.approx(4.0)
    assert F.beta == pytest.approx(8.0)


def test_emos_predict_mean_and_sd():
    c = EmosCoefficients(c0=0.0, c1=1.0, c2=0.05, c3=0.0)
    F = emos_predict(c, np.array([0.4, 0.5, 0.6]))
    assert F.alpha / F.beta == pytest.approx(0.5)           # mean
    assert np.sqrt(F.alpha) / F.beta == pytest.approx(0.05)  # sd


def test_emos_large_mu_folds_mass_to_one():
    c = EmosCoefficients(c0=2.0, c1=0.0, c2=0.1, c3=0.0)
    F = emos_predict(c, np.array([0.5]))
    assert F.omega1 > 0.5
    assert F.omega0 == 0.0


def test_emos_median_inversion_consistency():
    c = EmosCoefficients(c0=0.05, c1=0.9, c2=0.04, c3=0.3)
    F = emos_predict(c, np.array([0.3, 0.45, 0.6]))
    med = cdf_quantile(F, 0.5)
    assert F.eval(med) == pytest.approx(0.5, abs=1e-6)


def test_emos_sigma_floor_at_prediction():
    c = EmosCoefficients(c0=0.5, c1=0.0, c2=-0.2, c3=0.0)
    F = emos_predict(c, np.array([0.5, 0.5]))
    assert F.alpha > 0 and F.beta > 0  # floored sigma keeps Gamma valid


def test_emos_member_permutation_invariance():
    c = EmosCoefficients(c0=0.02, c1=1.0, c2=0.03, c3=0.5)
    meds = np.array([0.2, 0.5, 0.7, 0.4])
    a = emos_predict(c, meds)
    b = emos_predict(c, meds[::-1])
    assert (a.alpha, a.beta) == (b.alpha, b.beta)


def test_emos_self_consistency_on_gamma_data():
    rng = np.random.default_rng(11)
    n, m = 10000, 8
    medians = np.clip(rng.uniform(0.2, 0.7, (n, 1)) + rng.normal(0, 0.08, (n, m)), 0, 1)
    true = (0.1, 0.8, 0.05, 0.5)
    mu = true[0] + true[1] * medians.mean(axis=1)
    sigma = true[2] + true[3] * medians.std(axis=1)
    alpha, beta = mu**2 / sigma**2, mu / sigma**2
    y = np.clip(rng.gamma(shape=alpha, scale=1.0 / beta), 0.0, 1.0)
    fit = fit_emos_gamma(medians, y, seed=0)
    y_adj = np.maximum(y, 1e-6)
    crps_true = float(np.mean(crps_gamma_closed(alpha, beta, y_adj)))
    mu_f = fit.c0 + fit.c1 * medians.mean(axis=1)
    sigma_f = fit.c2 + fit.c3 * medians.std(axis=1)
    crps_fit = float(
        np.mean(crps_gamma_closed(mu_f**2 / sigma_f**2, mu_f / sigma_f**2, y_adj))
    )
    assert crps_fit <= crps_true * 1.02


def test_emos_zero_variance_column_stays_finite():
    rng = np.random.default_rng(12)
    n = 200
    medians = np.tile(rng.uniform(0.3, 0.7, (n, 1)), (1, 5))  # identical members
    y = np.clip(medians[:, 0] + rng.normal(0, 0.1, n), 0, 1)
    fit = fit_emos_gamma(medians, y, seed=0, restarts=2, maxiter=200)
    assert np.isfinite([fit.c0, fit.c1, fit.c2, fit.c3]).all()
    F = emos_predict(fit, medians[0])
    assert F.alpha > 0 and F.beta > 0


def test_emos_requires_enough_pairs():
    rng = np.random.default_rng(13)
    with pytest.raises(ParameterError, match="at least 50"):
        fit_emos_gamma(rng.uniform(0, 1, (10, 4)), rng.uniform(size=10))


# ---------------------------------------------------------------------------
# per-horizon tables and serialization
# ---------------------------------------------------------------------------

def synthetic_horizon_data(rng, n):
    centers = rng.uniform(0.25, 0.75, size=n)
    mu = centers[:, None] + rng.normal(0, 0.04, (n, 4))
    iqr = rng.uniform(0.05, 0.2, (n, 4))
    y = np.clip(centers + rng.normal(0, 0.12, n), 0, 1)
    return mu, iqr, y


def test_combination_table_neighbor_fallback():
    rng = np.random.default_rng(14)
    data = {
        6: synthetic_horizon_data(rng, 80),
        12: synthetic_horizon_data(rng, 10),   # short
        18: synthetic_horizon_data(rng, 80),
    }
    table = fit_combination_table(
        data, seed=0, restarts=1, maxiter=40, inner_grid=33
    )
    assert set(table) == {6, 12, 18}
    assert table[6].fallback == ""
    assert table[12].fallback == "neighbor:6"
    assert (table[12].lambda0, table[12].a) == (table[6].lambda0, table[6].a)


def test_combination_table_identity_when_no_data():
    rng = np.random.default_rng(15)
    data = {6: synthetic_horizon_data(rng, 5), 12: synthetic_horizon_data(rng, 8)}
    table = fit_combination_table(data, seed=0)
    assert all(c.fallback == "identity" for c in table.values())
    assert table[6].a == 1.0 and table[6].lambda0 == 0.05


def test_emos_table_fallback():
    rng = np.random.default_rng(16)
    meds = np.clip(rng.uniform(0.2, 0.8, (60, 4)), 0, 1)
    y = np.clip(meds.mean(axis=1) + rng.normal(0, 0.1, 60), 0, 1)
    data = {6: (meds, y), 12: (meds[:5], y[:5])}
    table = fit_emos_table(data, seed=0, restarts=1, maxiter=60)
    assert table[12].fallback == "neighbor:6"
    assert table[6].fallback == ""


def test_table_json_round_trip():
    tables = {
        "farm0": {
            6: CombinationCoefficients(0.03, 0.9, 1.1, 0.8, mean_crps=0.08, iterations=42),
            12: CombinationCoefficients(0.05, 1.0, 1.0, 1.0, fallback="neighbor:6"),
        },
        "farm1": {6: identity_coefficients()},
    }
    doc = combination_table_to_json(tables)
    back = combination_table_from_json(doc)
    assert back["farm0"][6] == tables["farm0"][6]
    assert back["farm0"][12].fallback == "neighbor:6"
    assert back["farm1"][6].a == 1.0

    emos = {"farm0": {6: EmosCoefficients(0.01, 1.0, 0.05, 0.5, mean_crps=0.1)}}
    emos_doc = emos_table_to_json(emos)
    eback = emos_table_from_json(emos_doc)
    assert eback["farm0"][6] == emos["farm0"][6]


def test_table_json_rejects_wrong_format():
    tables = {"farm0": {6: identity_coefficients()}}
    doc = combination_table_to_json(tables)
    with pytest.raises(FormatError):
        emos_table_from_json(doc)
    bad = dict(doc)
    bad["version"] = 99
    with pytest.raises(FormatError, match="version"):
        combination_table_from_json(bad)
    incomplete = combination_table_to_json(tables)
    del incomplete["farms"]["farm0"]["6"]["a"]
    with pytest.raises(FormatError, match="missing"):
        combination_table_from_json(incomplete)
