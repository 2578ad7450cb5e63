"""Gradient-boosted quantile regression trees with tuning and rearrangement.

One boosted ensemble per quantile level; each boosting round fits a
depth-limited tree to the pinball-loss negative gradient on an 80% row
subsample, and leaf values are lower empirical quantiles of the residuals
reaching the leaf.  Tree growing and application run on numba or numpy
kernels selected at call time (see ``_accel``); everything random is driven
by explicit seeds so refits are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from ._accel import get_kernels
from .core import ConfigError, FormatError, ParameterError, SchemaError, derive_seed

SERIAL_FORMAT = "windcast-qgbt"
SERIAL_VERSION = 1


@dataclass(frozen=True)
class GbtHyperparams:
    """Boosting controls; the learning rate, bag fraction and the
    square-root feature rule are fixed, the integer fields are tunable."""

    max_depth: int = 6
    min_samples_split: int = 20
    min_samples_leaf: int = 10
    n_estimators: int = 100
    learning_rate: float = 0.1
    subsample_fraction: float = 0.8

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise ParameterError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_samples_split < 2:
            raise ParameterError(
                f"min_samples_split must be >= 2, got {self.min_samples_split}"
            )
        if self.min_samples_leaf < 1:
            raise ParameterError(
                f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}"
            )
        if self.n_estimators < 1:
            raise ParameterError(
                f"n_estimators must be >= 1, got {self.n_estimators}"
            )
        if not 0.0 < self.learning_rate <= 1.0:
            raise ParameterError(
                f"learning_rate must be in (0, 1], got {self.learning_rate}"
            )
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ParameterError(
                f"subsample_fraction must be in (0, 1], got {self.subsample_fraction}"
            )


@dataclass(frozen=True)
class SearchSpace:
    """Inclusive integer tuning ranges for the four tunable fields."""

    max_depth: tuple[int, int] = (5, 9)
    min_samples_split: tuple[int, int] = (2, 350)
    min_samples_leaf: tuple[int, int] = (2, 350)
    n_estimators: tuple[int, int] = (2, 150)

    def __post_init__(self) -> None:
        for name in ("max_depth", "min_samples_split", "min_samples_leaf", "n_estimators"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} range is empty: [{lo}, {hi}]")

    def clamped(self, n_rows: int) -> "SearchSpace":
        """Shrink row-count ranges so every candidate stays fittable on a
        CV half of ``n_rows`` rows (leaves need at most half the rows)."""
        cap = max(2, n_rows // 2)

        def clamp(rng: tuple[int, int]) -> tuple[int, int]:
            lo, hi = rng
            return min(lo, cap), min(hi, cap)

        return replace(
            self,
            min_samples_split=clamp(self.min_samples_split),
            min_samples_leaf=clamp(self.min_samples_leaf),
        )

    def sample(self, rng: np.random.Generator, base: GbtHyperparams) -> GbtHyperparams:
        return replace(
            base,
            max_depth=int(rng.integers(self.max_depth[0], self.max_depth[1] + 1)),
            min_samples_split=int(
                rng.integers(self.min_samples_split[0], self.min_samples_split[1] + 1)
            ),
            min_samples_leaf=int(
                rng.integers(self.min_samples_leaf[0], self.min_samples_leaf[1] + 1)
            ),
            n_estimators=int(
                rng.integers(self.n_estimators[0], self.n_estimators[1] + 1)
            ),
        )

    def contains(self, hp: GbtHyperparams) -> bool:
        return (
            self.max_depth[0] <= hp.max_depth <= self.max_depth[1]
            and self.min_samples_split[0] <= hp.min_samples_split <= self.min_samples_split[1]
            and self.min_samples_leaf[0] <= hp.min_samples_leaf <= self.min_samples_leaf[1]
            and self.n_estimators[0] <= hp.n_estimators <= self.n_estimators[1]
        )

    def scale(self, hp: GbtHyperparams) -> np.ndarray:
        out = np.empty(4)
        for i, name in enumerate(
            ("max_depth", "min_samples_split", "min_samples_leaf", "n_estimators")
        ):
            lo, hi = getattr(self, name)
            v = getattr(hp, name)
            out[i] = 0.0 if hi == lo else (v - lo) / (hi - lo)
        return out


SEARCH_ENSEMBLE = SearchSpace()
SEARCH_HRES = SearchSpace(
    max_depth=(5, 9),
    min_samples_split=(10, 160),
    min_samples_leaf=(10, 110),
    n_estimators=(50, 400),
)


@dataclass(frozen=True)
class FlatTree:
    """One regression tree as parallel arrays; feature -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return get_kernels().apply_tree(
            self.feature, self.threshold, self.left, self.right, self.value, X
        )


@dataclass(frozen=True)
class BoostedEnsemble:
    """Additive model F0 + lr * sum(trees) for one quantile level."""

    tau: float
    f0: float
    learning_rate: float
    trees: tuple[FlatTree, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        out = np.full(X.shape[0], self.f0, dtype=np.float64)
        for tree in self.trees:
            out += self.learning_rate * tree.apply(X)
        return out


@dataclass(frozen=True)
class QGbtModel:
    """Per-quantile boosted ensembles over a shared feature schema."""

    tau_grid: tuple[float, ...]
    feature_names: tuple[str, ...]
    hyperparams: GbtHyperparams
    seed: int
    ensembles: tuple[BoostedEnsemble, ...] = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.ensembles) != len(self.tau_grid):
            raise ParameterError("one ensemble per quantile level required")
        for tau, ens in zip(self.tau_grid, self.ensembles):
            if ens.tau != tau:
                raise ParameterError("ensemble order must match the quantile grid")


def _as_matrix(X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError(f"feature matrix must be 2-d, got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ParameterError("feature matrix contains non-finite values")
    return X


def _check_training(X: np.ndarray, y: np.ndarray, tau: float, hp: GbtHyperparams) -> tuple[np.ndarray, np.ndarray]:
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ParameterError("targets must be 1-d and aligned with features")
    if not np.all(np.isfinite(y)):
        raise ParameterError("targets contain non-finite values")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ParameterError("targets must be normalized power in [0, 1]")
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"quantile level must be in (0, 1), got {tau}")
    if X.shape[0] < 2 * hp.min_samples_leaf:
        raise ParameterError(
            f"need at least {2 * hp.min_samples_leaf} rows, got {X.shape[0]}"
        )
    return X, y


def _lower_quantile(values: np.ndarray, tau: float) -> float:
    r = np.sort(values)
    k = max(0, int(np.ceil(len(r) * tau)) - 1)
    return float(r[k])


def _n_split_features(n_features: int) -> int:
    return max(1, int(round(math.sqrt(n_features))))


def fit_quantile_gbt(
    X: np.ndarray,
    y: np.ndarray,
    tau: float,
    hp: GbtHyperparams,
    seed: int,
) -> BoostedEnsemble:
    """Fit one boosted ensemble for quantile level ``tau``."""
    X, y = _check_training(X, y, tau, hp)
    kern = get_kernels()
    n, p = X.shape
    n_sub = _n_split_features(p)
    f0 = _lower_quantile(y, tau)
    F = np.full(n, f0, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(seed, 0xBA6))
    n_bag = max(1, int(round(hp.subsample_fraction * n)))
    trees: list[FlatTree] = []
    for t in range(hp.n_estimators):
        if n_bag < n:
            bag = np.sort(rng.permutation(n)[:n_bag])
            Xb, yb, Fb = X[bag], y[bag], F[bag]
        else:
            Xb, yb, Fb = X, y, F
        g01 = (yb < Fb).astype(np.uint8)
        resid = yb - Fb
        # Mask to the int64 range: numba kernel arguments are signed.
        node_seed = derive_seed(seed, t) & 0x7FFFFFFFFFFFFFFF
        feat, thr, left, right, value, n_nodes = kern.grow_tree(
            np.ascontiguousarray(Xb),
            g01,
            resid,
            tau,
            hp.max_depth,
            hp.min_samples_split,
            hp.min_samples_leaf,
            n_sub,
            node_seed,
        )
        tree = FlatTree(
            feature=feat[:n_nodes].copy(),
            threshold=thr[:n_nodes].copy(),
            left=left[:n_nodes].copy(),
            right=right[:n_nodes].copy(),
            value=value[:n_nodes].copy(),
        )
        trees.append(tree)
        F = F + hp.learning_rate * tree.apply(X)
    return BoostedEnsemble(tau=tau, f0=f0, learning_rate=hp.learning_rate, trees=tuple(trees))


def fit_quantile_model(
    X: np.ndarray,
    y: np.ndarray,
    tau_grid: Sequence[float],
    hp: GbtHyperparams,
    seed: int,
    feature_names: Sequence[str] | None = None,
) -> QGbtModel:
    """Fit one ensemble per quantile level with decorrelated child seeds."""
    taus = tuple(float(t) for t in tau_grid)
    if sorted(taus) != list(taus) or len(set(taus)) != len(taus):
        raise ParameterError("quantile grid must be strictly increasing")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{i}" for i in range(_as_matrix(X).shape[1])
    )
    ensembles = tuple(
        fit_quantile_gbt(X, y, tau, hp, derive_seed(seed, i))
        for i, tau in enumerate(taus)
    )
    return QGbtModel(
        tau_grid=taus,
        feature_names=names,
        hyperparams=hp,
        seed=seed,
        ensembles=ensembles,
    )


def predict_quantiles(
    model: QGbtModel,
    X: np.ndarray,
    feature_names: Sequence[str] | None = None,
) -> np.ndarray:
    """Predicted quantiles per row, rearranged ascending then clipped to [0, 1].

    Rows of the returned array pair with ``model.tau_grid``.
    """
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        unknown = [n for n in feature_names if n not in model.feature_names]
        raise SchemaError(
            f"feature names do not match training schema: unexpected {unknown}"
            if unknown
            else "feature names do not match training order"
        )
    X = _as_matrix(X)
    if X.shape[1] != len(model.feature_names):
        raise SchemaError(
            f"expected {len(model.feature_names)} features, got {X.shape[1]}"
        )
    raw = np.column_stack([ens.predict(X) for ens in model.ensembles])
    raw.sort(axis=1)
    return np.clip(raw, 0.0, 1.0)


# ---------------------------------------------------------------------------
# hyperparameter tuning
# ---------------------------------------------------------------------------

def _pinball_mean(y: np.ndarray, q: np.ndarray, tau: float) -> float:
    d = y - q
    return float(np.mean(np.maximum(tau * d, (tau - 1.0) * d)))


def _cv_score(
    X: np.ndarray,
    y: np.ndarray,
    tau: float,
    hp: GbtHyperparams,
    perm: np.ndarray,
    seed: int,
) -> float:
    half = len(perm) // 2
    a, b = perm[:half], perm[half:]
    losses = []
    for fit_idx, val_idx, tag in ((a, b, 0), (b, a, 1)):
        ens = fit_quantile_gbt(X[fit_idx], y[fit_idx], tau, hp, derive_seed(seed, tag))
        losses.append(_pinball_mean(y[val_idx], ens.predict(X[val_idx]), tau))
    return 0.5 * (losses[0] + losses[1])


def _expected_improvement(
    scaled_obs: np.ndarray,
    scores: np.ndarray,
    pool: np.ndarray,
    length_scale: float = 0.3,
) -> np.ndarray:
    """EI at pool points under a fixed-scale Gaussian-process surrogate."""
    spread = scores.std()
    z = (scores - scores.mean()) / (spread if spread > 0 else 1.0)
    d2 = ((scaled_obs[:, None, :] - scaled_obs[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-0.5 * d2 / length_scale**2)
    K[np.diag_indices_from(K)] += 1e-6
    factor = cho_factor(K)
    alpha = cho_solve(factor, z)
    d2p = ((pool[:, None, :] - scaled_obs[None, :, :]) ** 2).sum(axis=2)
    Ks = np.exp(-0.5 * d2p / length_scale**2)
    mu = Ks @ alpha
    v = cho_solve(factor, Ks.T)
    var = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 1e-12)
    sd = np.sqrt(var)
    best = z.min()
    u = (best - mu) / sd
    pdf = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return sd * (u * ndtr(u) + pdf)


def tune_hyperparams(
    X: np.ndarray,
    y: np.ndarray,
    tau: float,
    budget: int,
    seed: int,
    space: SearchSpace = SEARCH_ENSEMBLE,
    base: GbtHyperparams = GbtHyperparams(),
) -> GbtHyperparams:
    """Search the integer box for the candidate with the lowest CV pinball.

    Candidates are scored by random-permutation 2-fold cross-validation (one
    50/50 permutation per call, fit both directions, losses averaged).  With
    ``budget`` of at least 12 the search runs expected improvement over a
    Gaussian-process surrogate after 8 random candidates; smaller budgets use
    plain random search.  Ties keep the earliest candidate.  Callers refit on
    all rows with the returned hyperparameters.
    """
    if budget < 1:
        raise ConfigError(f"tuning budget must be >= 1, got {budget}")
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = X.shape[0]
    if n < 8:
        raise ParameterError(f"need at least 8 rows to cross-validate, got {n}")
    space = space.clamped(n // 2)
    rng = np.random.default_rng(derive_seed(seed, 0x7CE))
    if budget == 1:
        return space.sample(rng, base)

    perm = rng.permutation(n)
    candidates: list[GbtHyperparams] = []
    scores: list[float] = []
    seen: set[tuple[int, int, int, int]] = set()

    def key(hp: GbtHyperparams) -> tuple[int, int, int, int]:
        return (hp.max_depth, hp.min_samples_split, hp.min_samples_leaf, hp.n_estimators)

    def evaluate(hp: GbtHyperparams) -> None:
        candidates.append(hp)
        seen.add(key(hp))
        scores.append(_cv_score(X, y, tau, hp, perm, derive_seed(seed, len(candidates))))

    n_random = budget if budget < 12 else 8
    for _ in range(n_random):
        evaluate(space.sample(rng, base))
    while len(candidates) < budget:
        pool = [space.sample(rng, base) for _ in range(128)]
        fresh = [hp for hp in pool if key(hp) not in seen]
        if not fresh:
            break
        ei = _expected_improvement(
            np.array([space.scale(hp) for hp in candidates]),
            np.array(scores),
            np.array([space.scale(hp) for hp in fresh]),
        )
        evaluate(fresh[int(np.argmax(ei))])
    return candidates[int(np.argmin(scores))]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _tree_to_node(tree: FlatTree, idx: int) -> dict:
    if tree.feature[idx] < 0:
        return {"value": float(tree.value[idx])}
    return {
        "feature": int(tree.feature[idx]),
        "threshold": float(tree.threshold[idx]),
        "left": _tree_to_node(tree, int(tree.left[idx])),
        "right": _tree_to_node(tree, int(tree.right[idx])),
    }


def _node_to_flat(node: dict) -> FlatTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def walk(rec: dict) -> int:
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if "value" in rec:
            value[idx] = float(rec["value"])
        else:
            feature[idx] = int(rec["feature"])
            threshold[idx] = float(rec["threshold"])
            left[idx] = walk(rec["left"])
            right[idx] = walk(rec["right"])
        return idx

    walk(node)
    return FlatTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )


def model_to_json(model: QGbtModel) -> dict:
    return {
        "format": SERIAL_FORMAT,
        "version": SERIAL_VERSION,
        "tau_grid": list(model.tau_grid),
        "feature_names": list(model.feature_names),
        "seed": model.seed,
        "hyperparams": {
            "max_depth": model.hyperparams.max_depth,
            "min_samples_split": model.hyperparams.min_samples_split,
            "min_samples_leaf": model.hyperparams.min_samples_leaf,
            "n_estimators": model.hyperparams.n_estimators,
            "learning_rate": model.hyperparams.learning_rate,
            "subsample_fraction": model.hyperparams.subsample_fraction,
        },
        "ensembles": [
            {
                "tau": ens.tau,
                "f0": ens.f0,
                "learning_rate": ens.learning_rate,
                "trees": [_tree_to_node(t, 0) for t in ens.trees],
            }
            for ens in model.ensembles
        ],
    }


def model_from_json(payload: dict) -> QGbtModel:
    if payload.get("format") != SERIAL_FORMAT:
        raise FormatError(f"not a serialized quantile-GBT model: {payload.get('format')!r}")
    if payload.get("version") != SERIAL_VERSION:
        raise FormatError(f"unsupported model version {payload.get('version')!r}")
    hp = GbtHyperparams(**payload["hyperparams"])
    ensembles = tuple(
        BoostedEnsemble(
            tau=float(rec["tau"]),
            f0=float(rec["f0"]),
            learning_rate=float(rec["learning_rate"]),
            trees=tuple(_node_to_flat(n) for n in rec["trees"]),
        )
        for rec in payload["ensembles"]
    )
    return QGbtModel(
        tau_grid=tuple(float(t) for t in payload["tau_grid"]),
        feature_names=tuple(payload["feature_names"]),
        hyperparams=hp,
        seed=int(payload["seed"]),
        ensembles=ensembles,
    )


def save_model(model: QGbtModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)))


def load_model(path: str | Path) -> QGbtModel:
    return model_from_json(json.loads(Path(path).read_text()))


__all__ = [
    "BoostedEnsemble",
    "FlatTree",
    "GbtHyperparams",
    "QGbtModel",
    "SEARCH_ENSEMBLE",
    "SEARCH_HRES",
    "SearchSpace",
    "fit_quantile_gbt",
    "fit_quantile_model",
    "load_model",
    "model_from_json",
    "model_to_json",
    "predict_quantiles",
    "save_model",
    "tune_hyperparams",
]
