import json
import math

import numpy as np
import pytest
from sklearn.linear_model import ElasticNet, Lasso
from sklearn.metrics import mean_absolute_error, r2_score

from qcmfit.regression import (
    FAMILIES,
    ConvergenceError,
    CvConfig,
    ModelSpec,
    coordinate_descent,
    cross_validate,
    cumulative_rmse,
    default_specs,
    fit_model,
    fold_state,
    kfold_split,
    kkt_violation,
    lasso_lambda_max,
    metrics,
    save_predictions,
    save_topk_curve,
    topk_curve,
)


@pytest.fixture
def linear_data():
    r = np.random.default_rng(0)
    X = r.normal(size=(150, 8))
    w = np.array([2.0, -1.0, 0.5, 0, 0, 0, 0, 0])
    y = X @ w + 3.0 + 0.1 * r.normal(size=150)
    return X, y


@pytest.mark.parametrize("lam,l1_ratio", [(0.05, 1.0), (0.2, 1.0), (0.05, 0.5), (0.3, 0.2)])
def test_coordinate_descent_matches_sklearn(linear_data, lam, l1_ratio):
    X, y = linear_data
    fit = coordinate_descent(X, y, lam, l1_ratio, tol=1e-12)
    if l1_ratio == 1.0:
        ref = Lasso(alpha=lam, tol=1e-12, max_iter=100000).fit(X, y)
    else:
        ref = ElasticNet(alpha=lam, l1_ratio=l1_ratio, tol=1e-12, max_iter=100000).fit(X, y)
    np.testing.assert_allclose(fit.coef, ref.coef_, atol=1e-7)
    assert fit.intercept == pytest.approx(ref.intercept_, abs=1e-7)
    assert kkt_violation(X, y, fit, lam, l1_ratio) < 1e-6


def test_lambda_max_zeroes_all_coefficients(linear_data):
    X, y = linear_data
    lmax = lasso_lambda_max(X, y)
    assert np.all(coordinate_descent(X, y, lmax * 1.0001).coef == 0)
    assert np.any(coordinate_descent(X, y, lmax * 0.99).coef != 0)
    assert coordinate_descent(X, y, lmax * 1.0001).intercept == pytest.approx(y.mean())


def test_coordinate_descent_reports_nonconvergence(linear_data):
    X, y = linear_data
    with pytest.raises(ConvergenceError, match="duality gap"):
        coordinate_descent(X, y, 1e-4, tol=1e-14, max_iter=1)


def test_spec_validation():
    with pytest.raises(ValueError, match="family"):
        ModelSpec("knn")
    with pytest.raises(ValueError, match="unknown hyperparameters"):
        ModelSpec("lasso", {"alpha": 1.0})
    with pytest.raises(ValueError):
        ModelSpec("svr", {"C": 0.0})
    with pytest.raises(ValueError):
        ModelSpec("elastic_net", {"l1_ratio": 2.0})
    assert ModelSpec("svr", {"C": 10.0}).resolved()["epsilon"] == 0.1
    assert [s.family for s in default_specs()] == list(FAMILIES)
    assert default_specs(seed=7)[3].resolved()["seed"] == 7


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_learns_a_linear_signal(linear_data, family):
    X, y = linear_data
    model = fit_model(ModelSpec(family), X[:100], y[:100])
    assert metrics(y[100:], model.predict(X[100:])).r2 > 0.6


def test_fit_model_rejects_nonfinite(linear_data):
    X, y = linear_data
    X = X.copy()
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        fit_model(ModelSpec("lasso"), X, y)


def test_metrics_against_sklearn():
    r = np.random.default_rng(1)
    y, yhat = r.normal(size=40), r.normal(size=40)
    m = metrics(y, yhat)
    assert m.r2 == pytest.approx(r2_score(y, yhat))
    assert m.mae == pytest.approx(mean_absolute_error(y, yhat))
    assert m.rmse == pytest.approx(math.sqrt(np.mean((y - yhat) ** 2)))
    with pytest.raises(ValueError):
        metrics(np.ones(5), np.zeros(5))


def test_cumulative_rmse_hand_example():
    y = np.array([0.1, 0.5, 1.0, 2.0])
    yhat = np.array([0.2, 0.5, 1.3, 2.0])
    out = cumulative_rmse(y, yhat, [0.0, 0.25, 1.0, 2.0])
    assert math.isnan(out[0])
    assert out[1] == pytest.approx(0.1)
    assert out[2] == pytest.approx(math.sqrt((0.01 + 0.09) / 3))
    assert out[3] == pytest.approx(math.sqrt(0.1 / 4))


def test_kfold_split_balanced_and_seeded():
    a = kfold_split(103, 5, 3)
    assert sorted(np.bincount(a).tolist()) == [20, 20, 21, 21, 21]
    np.testing.assert_array_equal(a, kfold_split(103, 5, 3))
    assert not np.array_equal(a, kfold_split(103, 5, 4))
    with pytest.raises(ValueError):
        kfold_split(3, 5, 0)
    with pytest.raises(ValueError):
        CvConfig(folds=1)


def test_fold_state_ignores_validation_rows(linear_data):
    X, y = linear_data
    tr = np.arange(120)
    X2, y2 = X.copy(), y.copy()
    X2[120:] = 1e6
    y2[120:] = -1e6
    for a, b in zip(fold_state(X, y, tr), fold_state(X2, y2, tr)):
        np.testing.assert_array_equal(a, b)


def test_cross_validate_structure(linear_data, tmp_path):
    X, y = linear_data
    specs = [ModelSpec("lasso"), ModelSpec("random_forest", {"n_estimators": 30})]
    rep = cross_validate(X, y, specs, CvConfig(k_grid=(1, 3, 20)))
    assert set(rep.aggregates) == {(f, k) for f in ("lasso", "random_forest") for k in (1, 3, 8)}
    assert len(rep.cells) == 5 * 3 * 2
    assert rep.best[0] == "lasso" and rep.best[1] >= 3
    assert rep.aggregates[rep.best]["val_r2_mean"] > 0.95
    assert np.all(np.isfinite(rep.predictions))
    assert all(r[0] == 0 and sorted(r.tolist()) == list(range(8)) for r in rep.rankings)
    doc = json.loads(rep.to_json(names=[f"x{i}" for i in range(8)]))
    assert doc["best"]["family"] == rep.best[0] and len(doc["rankings"]) == 5
    curve = topk_curve(rep)
    assert [k for k, _ in curve["lasso"]] == [1, 3, 8]
    save_topk_curve(curve, tmp_path / "t.csv")
    save_predictions(y, rep.predictions, tmp_path / "p.csv")
    assert (tmp_path / "t.csv").read_text().startswith("family,k,val_r2_mean\nlasso,1,")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 151


def test_cross_validate_deterministic(linear_data):
    X, y = linear_data
    specs = default_specs(("svr", "grad_boost"))
    a = cross_validate(X, y, specs, CvConfig(k_grid=(2, 8)))
    b = cross_validate(X, y, specs, CvConfig(k_grid=(2, 8)))
    assert a.to_json() == b.to_json()


def test_duplicate_labels_rejected(linear_data):
    X, y = linear_data
    with pytest.raises(ValueError, match="unique"):
        cross_validate(X, y, [ModelSpec("lasso"), ModelSpec("lasso")])
