import numpy as np
import pytest
from helpers import brute_force_mrmr

from qcmfit.features import (
    MiConfig,
    mrmr_rank,
    mutual_information,
    pearson_matrix,
    quantile_bins,
    relevance_and_redundancy,
    save_matrix,
    save_ranking,
)


def test_quantile_bins_equal_frequency():
    b = quantile_bins(np.random.default_rng(0).normal(size=800), 8)
    assert np.bincount(b).tolist() == [100] * 8


def test_quantile_bins_ties_share_a_bin():
    b = quantile_bins(np.r_[np.zeros(50), np.arange(1.0, 51.0)], 4)
    assert len(set(b[:50])) == 1


def test_self_information_is_three_bits():
    x = np.random.default_rng(1).normal(size=4000)
    assert mutual_information(x, x) == pytest.approx(3.0, abs=1e-12)


def test_independent_pair_near_zero():
    r = np.random.default_rng(2)
    assert mutual_information(r.normal(size=10_000), r.normal(size=10_000)) <= 0.02


def test_mi_symmetric_and_monotone_invariant():
    r = np.random.default_rng(3)
    x = r.normal(size=500)
    y = x + r.normal(size=500)
    assert mutual_information(x, y) == pytest.approx(mutual_information(y, x), abs=1e-12)
    assert mutual_information(np.exp(x), y ** 3) == mutual_information(x, y)


def test_mi_input_checks():
    with pytest.raises(ValueError):
        mutual_information(np.arange(10.0), np.arange(10.0))
    with pytest.raises(ValueError):
        mutual_information(np.arange(40.0), np.arange(41.0))
    with pytest.raises(ValueError):
        MiConfig(bins=1)


def test_redundancy_diagonal_is_entropy():
    X = np.random.default_rng(4).normal(size=(400, 3))
    rel, red = relevance_and_redundancy(X, X[:, 0])
    np.testing.assert_allclose(np.diag(red), 3.0)
    np.testing.assert_allclose(red, red.T)
    assert rel[0] == pytest.approx(3.0)


@pytest.mark.parametrize("trial", range(20))
def test_greedy_matches_brute_force(trial):
    r = np.random.default_rng(100 + trial)
    X = r.normal(size=(300, 6))
    X[:, 3] = X[:, 0] + 0.3 * r.normal(size=300)
    y = X[:, 0] + 0.5 * X[:, 1] + 0.2 * r.normal(size=300)
    assert mrmr_rank(X, y).order.tolist() == brute_force_mrmr(X, y)


def test_mrmr_skips_redundant_copy():
    r = np.random.default_rng(5)
    a, b = r.normal(size=1000), r.normal(size=1000)
    X = np.column_stack([a, a + 1e-3 * r.normal(size=1000), b])
    y = a + 0.8 * b
    order = mrmr_rank(X, y).order.tolist()
    assert order[0] in (0, 1) and order[1] == 2


def test_mrmr_monotone_transform_invariance():
    r = np.random.default_rng(6)
    X = r.normal(size=(300, 5))
    y = X[:, 2] - X[:, 4] + r.normal(size=300)
    Xt = X.copy()
    Xt[:, 1] = np.exp(Xt[:, 1])
    Xt[:, 3] = -Xt[:, 3] ** 3
    np.testing.assert_array_equal(mrmr_rank(X, y).order, mrmr_rank(Xt, y).order)


def test_mrmr_prefix_and_bad_k():
    r = np.random.default_rng(7)
    X = r.normal(size=(200, 5))
    y = X @ np.arange(5.0)
    full = mrmr_rank(X, y)
    assert mrmr_rank(X, y, k=2).order.tolist() == full.order[:2].tolist()
    assert full.scores[0] == full.relevance[full.order[0]]
    with pytest.raises(ValueError):
        mrmr_rank(X, y, k=0)


def test_pearson_matrix_and_constant_column():
    r = np.random.default_rng(8)
    x = r.normal(size=100)
    X = np.column_stack([x, 2 * x + 1, -x, np.full(100, 4.0)])
    R, const = pearson_matrix(X)
    assert const == (3,)
    np.testing.assert_allclose(R[0, :3], [1.0, 1.0, -1.0])
    assert R[3, 0] == 0.0 and R[3, 3] == 1.0
    np.testing.assert_allclose(R[:2, :2], np.corrcoef(X[:, :2].T))


def test_ranking_files(tmp_path):
    X = np.random.default_rng(9).normal(size=(100, 3))
    res = mrmr_rank(X, X[:, 1])
    save_ranking(res, ["a", "b", "c"], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "rank,descriptor,score,relevance"
    assert lines[1].startswith("1,b,")
    save_matrix(np.eye(2), ["a", "b"], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines() == [",a,b", "a,1.0,0.0", "b,0.0,1.0"]
