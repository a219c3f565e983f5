"""Regression model zoo and leakage-free cross-validation.

Lasso and elastic net are solved here by cyclic coordinate descent on the
covariance (Gram) form, stopped on the duality gap.  SVR (libsvm SMO),
random forest and histogram gradient boosting (second-order leaf values
with L2 leaf regularization) come from scikit-learn.

Inside every fold the standardization statistics and the mRMR ranking are
computed from the training rows only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import HistGradientBoostingRegressor, RandomForestRegressor
from sklearn.svm import SVR

from .features import MiConfig, mrmr_rank

FAMILIES = ("lasso", "elastic_net", "svr", "random_forest", "grad_boost")

DEFAULTS = {
    "lasso": {"lam": 0.03, "tol": 1e-6, "max_iter": 200000},
    "elastic_net": {"lam": 0.05, "l1_ratio": 0.5, "tol": 1e-6, "max_iter": 200000},
    "svr": {"C": 0.3, "epsilon": 0.1, "gamma": None},
    "random_forest": {"n_estimators": 300, "max_features": 1.0 / 3.0, "min_samples_leaf": 1,
                      "seed": 0},
    "grad_boost": {"n_rounds": 500, "learning_rate": 0.05, "max_depth": 4, "l2": 10.0,
                   "min_samples_leaf": 20, "early_stop": 10, "seed": 0},
}


class ConvergenceError(RuntimeError):
    pass


class CvError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    params: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        unknown = set(self.params) - set(DEFAULTS[self.family])
        if unknown:
            raise ValueError(f"{self.family}: unknown hyperparameters {sorted(unknown)}")
        p = self.resolved()
        if self.family in ("lasso", "elastic_net") and p["lam"] < 0:
            raise ValueError("lam must be non-negative")
        if self.family == "elastic_net" and not 0.0 <= p["l1_ratio"] <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")
        if self.family == "svr" and (p["C"] <= 0 or p["epsilon"] < 0):
            raise ValueError("svr needs C > 0 and epsilon >= 0")
        if self.family == "grad_boost" and not 0.0 < p["learning_rate"] <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")

    @property
    def label(self) -> str:
        return self.name or self.family

    def resolved(self) -> dict:
        return {**DEFAULTS[self.family], **self.params}


def default_specs(families=FAMILIES, seed: int = 0) -> list[ModelSpec]:
    out = []
    for fam in families:
        params = {"seed": seed} if "seed" in DEFAULTS[fam] else {}
        out.append(ModelSpec(fam, params))
    return out


# -- coordinate descent ---------------------------------------------------

@dataclass
class LinearFit:
    coef: np.ndarray
    intercept: float
    gap: float
    sweeps: int


def _dual_gap(X, y, w, l1, l2):
    """Elastic-net duality gap for 0.5*||y - Xw||^2 + l1*|w|_1 + 0.5*l2*||w||^2."""
    R = y - X @ w
    XtA = X.T @ R - l2 * w
    dual = float(np.max(np.abs(XtA))) if XtA.size else 0.0
    rn2 = float(R @ R)
    if dual > l1:
        const = l1 / dual
        gap = 0.5 * (rn2 + rn2 * const * const)
    else:
        const = 1.0
        gap = rn2
    gap += l1 * float(np.abs(w).sum()) - const * float(R @ y) + 0.5 * l2 * (1 + const * const) * float(w @ w)
    return gap


def coordinate_descent(X, y, lam: float, l1_ratio: float = 1.0, tol: float = 1e-6,
                       max_iter: int = 100000, inner: int = 50) -> LinearFit:
    """Minimize (1/2n)||y - b - Xw||^2 + lam*(l1_ratio*|w|_1 + (1-l1_ratio)/2*||w||^2).

    The intercept is handled by centering.  Full cyclic sweeps alternate
    with up to ``inner`` sweeps over the current nonzero set.  Stops when
    the duality gap, checked after every full sweep, falls below
    ``tol * ||y - mean(y)||^2``; otherwise raises :class:`ConvergenceError`
    with the last gap.  ``max_iter`` counts sweeps of either kind.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    l1 = lam * l1_ratio * n
    l2 = lam * (1.0 - l1_ratio) * n
    G = Xc.T @ Xc
    diag = np.diag(G).copy()
    w = np.zeros(d)
    grad = Xc.T @ yc  # X^T (y - Xw), kept current
    target = tol * max(float(yc @ yc), 1e-300)
    everything = [j for j in range(d) if diag[j] > 0]

    def sweep(coords):
        big = 0.0
        for j in coords:
            old = w[j]
            rho = grad[j] + diag[j] * old
            new = math.copysign(max(abs(rho) - l1, 0.0), rho) / (diag[j] + l2)
            if new != old:
                grad[:] -= G[:, j] * (new - old)
                w[j] = new
                big = max(big, abs(new - old))
        return big

    gap = np.inf
    sweeps = 0
    while sweeps < max_iter:
        sweep(everything)
        sweeps += 1
        gap = _dual_gap(Xc, yc, w, l1, l2)
        if gap <= target:
            return LinearFit(w, float(ym - xm @ w), gap, sweeps)
        active = [j for j in everything if w[j] != 0.0]
        for _ in range(inner):
            if sweeps >= max_iter:
                break
            sweeps += 1
            if sweep(active) <= 1e-15 * max(float(np.abs(w).max()), 1e-300):
                break
    raise ConvergenceError(f"coordinate descent stopped after {max_iter} sweeps with duality gap "
                           f"{gap:.3e} (target {target:.3e})")


def lasso_lambda_max(X, y) -> float:
    """Smallest lam giving an all-zero lasso solution: max|X^T y|/n on centered data."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.max(np.abs((X - X.mean(0)).T @ (y - y.mean()))) / X.shape[0])


def kkt_violation(X, y, fit: LinearFit, lam: float, l1_ratio: float = 1.0) -> float:
    """Largest violation of the elastic-net optimality conditions (per-sample scale)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    r = y - fit.intercept - X @ fit.coef
    g = X.T @ r / n - lam * (1.0 - l1_ratio) * fit.coef
    a = lam * l1_ratio
    nz = fit.coef != 0
    v_nz = np.abs(g[nz] - a * np.sign(fit.coef[nz]))
    v_z = np.maximum(np.abs(g[~nz]) - a, 0.0)
    return float(max(v_nz.max(initial=0.0), v_z.max(initial=0.0)))


# -- models ---------------------------------------------------------------

@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    mean: np.ndarray
    scale: np.ndarray
    estimator: object
    y_mean: float = 0.0
    y_scale: float = 1.0

    def predict(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        if isinstance(self.estimator, LinearFit):
            return Z @ self.estimator.coef + self.estimator.intercept
        return self.y_mean + self.y_scale * self.estimator.predict(Z)


def fit_model(spec: ModelSpec, X, y) -> Model:
    """Standardize with training statistics and fit one model."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data contain non-finite values")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - mean) / scale
    p = spec.resolved()
    fam = spec.family
    if fam == "lasso":
        est = coordinate_descent(Z, y, p["lam"], 1.0, p["tol"], p["max_iter"])
    elif fam == "elastic_net":
        est = coordinate_descent(Z, y, p["lam"], p["l1_ratio"], p["tol"], p["max_iter"])
    elif fam == "svr":
        # C and epsilon act on the standardized target
        y_mean, y_scale = float(y.mean()), float(y.std()) or 1.0
        gamma = p["gamma"] if p["gamma"] is not None else "scale"
        est = SVR(kernel="rbf", C=p["C"], epsilon=p["epsilon"], gamma=gamma)
        est.fit(Z, (y - y_mean) / y_scale)
        return Model(spec, mean, scale, est, y_mean, y_scale)
    elif fam == "random_forest":
        est = RandomForestRegressor(n_estimators=p["n_estimators"], max_features=p["max_features"],
                                    min_samples_leaf=p["min_samples_leaf"], bootstrap=True,
                                    random_state=p["seed"], n_jobs=1).fit(Z, y)
    else:
        est = HistGradientBoostingRegressor(max_iter=p["n_rounds"], learning_rate=p["learning_rate"],
                                            max_depth=p["max_depth"], l2_regularization=p["l2"],
                                            min_samples_leaf=p["min_samples_leaf"],
                                            early_stopping=p["early_stop"] > 0,
                                            n_iter_no_change=max(p["early_stop"], 1),
                                            validation_fraction=0.2,
                                            random_state=p["seed"]).fit(Z, y)
    return Model(spec, mean, scale, est)


def predict(model: Model, X) -> np.ndarray:
    return model.predict(X)


# -- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    mae: float

    def as_dict(self):
        return {"r2": self.r2, "rmse": self.rmse, "mae": self.mae}


def metrics(y, yhat) -> Metrics:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("metrics need two aligned arrays of length >= 2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for a constant target")
    err = y - yhat
    return Metrics(1.0 - float(err @ err) / ss_tot, float(np.sqrt(np.mean(err ** 2))),
                   float(np.mean(np.abs(err))))


def cumulative_rmse(y, yhat, thresholds):
    """RMSE over rows with target <= each threshold; NaN where a bucket is empty."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    out = []
    for t in thresholds:
        m = y <= t
        out.append(float(np.sqrt(np.mean((y[m] - yhat[m]) ** 2))) if m.any() else math.nan)
    return np.array(out)


# -- cross-validation -----------------------------------------------------

@dataclass(frozen=True)
class CvConfig:
    folds: int = 5
    seed: int = 0
    k_grid: tuple = (1, 2, 3, 5, 10, 20, 30, 40, 52)
    bins: int = 8

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if not self.k_grid or min(self.k_grid) < 1:
            raise ValueError("k_grid values must be positive")


def kfold_split(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per row: shuffled, sizes differing by at most one."""
    if n < folds:
        raise ValueError(f"cannot split {n} rows into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=int)
    for f, idx in enumerate(np.array_split(perm, folds)):
        assign[idx] = f
    return assign


def fold_state(X, y, train_idx, bins: int = 8):
    """Training-only standardization stats and mRMR order for one fold."""
    Xt = np.asarray(X, dtype=float)[train_idx]
    yt = np.asarray(y, dtype=float)[train_idx]
    mean, sd = Xt.mean(axis=0), Xt.std(axis=0)
    rank = mrmr_rank(Xt, yt, None, MiConfig(bins))
    return mean, sd, rank.order


@dataclass
class CvReport:
    cells: list
    aggregates: dict
    best: tuple
    predictions: np.ndarray
    fold_of: np.ndarray
    rankings: list
    oof: dict = field(repr=False, default_factory=dict)

    def to_json(self, names=None) -> str:
        agg = [{"family": f, "k": k, **v} for (f, k), v in sorted(self.aggregates.items())]
        rankings = [[names[i] for i in r] if names else [int(i) for i in r] for r in self.rankings]
        doc = {
            "best": {"family": self.best[0], "k": self.best[1]},
            "aggregates": agg,
            "cells": self.cells,
            "fold_of": [int(v) for v in self.fold_of],
            "rankings": rankings,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def cross_validate(X, y, specs, cv: CvConfig | None = None) -> CvReport:
    """K-fold CV with in-fold ranking; every (family, k) is scored on each fold."""
    cv = cv or CvConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    k_grid = sorted({min(int(k), d) for k in cv.k_grid})
    fold_of = kfold_split(n, cv.folds, cv.seed)
    cells, rankings = [], []
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"model labels must be unique, got {labels}")
    oof = {(s.label, k): np.full(n, np.nan) for s in specs for k in k_grid}
    for f in range(cv.folds):
        tr = np.flatnonzero(fold_of != f)
        va = np.flatnonzero(fold_of == f)
        _, _, order = fold_state(X, y, tr, cv.bins)
        rankings.append(order)
        for k in k_grid:
            cols = np.sort(order[:k])
            for spec in specs:
                try:
                    model = fit_model(spec, X[np.ix_(tr, cols)], y[tr])
                except (ConvergenceError, ValueError) as exc:
                    raise CvError(f"{spec.label} fold {f} k={k}: {exc}") from exc
                pt = model.predict(X[np.ix_(tr, cols)])
                pv = model.predict(X[np.ix_(va, cols)])
                oof[(spec.label, k)][va] = pv
                cells.append({"family": spec.label, "k": k, "fold": f,
                              "train": metrics(y[tr], pt).as_dict(),
                              "val": metrics(y[va], pv).as_dict()})
    aggregates = {}
    for key in oof:
        vals = [c["val"] for c in cells if (c["family"], c["k"]) == key]
        trains = [c["train"] for c in cells if (c["family"], c["k"]) == key]
        entry = {}
        for m in ("r2", "rmse", "mae"):
            v = np.array([x[m] for x in vals])
            t = np.array([x[m] for x in trains])
            entry[f"val_{m}_mean"] = float(v.mean())
            entry[f"val_{m}_sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
            entry[f"train_{m}_mean"] = float(t.mean())
        aggregates[key] = entry
    best = min(aggregates, key=lambda key: (aggregates[key]["val_rmse_mean"], key))
    return CvReport(cells, aggregates, best, oof[best].copy(), fold_of, rankings, oof)


def topk_curve(report: CvReport) -> dict:
    """Per family, (k, mean validation R^2) pairs in increasing k."""
    out: dict = {}
    for (fam, k), agg in sorted(report.aggregates.items()):
        out.setdefault(fam, []).append((k, agg["val_r2_mean"]))
    return out


def save_topk_curve(curve: dict, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("family", "k", "val_r2_mean"))
        for fam in sorted(curve):
            for k, r2 in curve[fam]:
                w.writerow((fam, k, repr(float(r2))))


def save_predictions(y, yhat, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "target", "oof_prediction"))
        for i, (a, b) in enumerate(zip(y, yhat)):
            w.writerow((i, repr(float(a)), repr(float(b))))
