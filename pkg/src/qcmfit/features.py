"""Mutual information, mRMR ranking and the descriptor correlation matrix.

MI is the plug-in estimate on a joint histogram of equal-frequency
(quantile) bins, in bits.  Binning uses average ranks, so ties share a bin
and any strictly monotone transform of a column leaves every estimate
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class MiConfig:
    bins: int = 8

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be at least 2")


@dataclass
class RankResult:
    order: np.ndarray
    scores: np.ndarray
    relevance: np.ndarray

    def names(self, names):
        return [names[i] for i in self.order]


def quantile_bins(x, bins: int) -> np.ndarray:
    """Equal-frequency bin index (0..bins-1) of each sample."""
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average")
    return np.minimum(((r - 1.0) * bins / x.size).astype(int), bins - 1)


def _mi_binned(bx, by, bins: int) -> float:
    n = bx.size
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins) / n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(px, py)
    return float(max(np.sum(joint[nz] * np.log2(joint[nz] / outer[nz])), 0.0))


def _check_length(n: int, cfg: MiConfig):
    if n < 4 * cfg.bins:
        raise ValueError(f"need at least {4 * cfg.bins} samples for {cfg.bins} bins, got {n}")


def mutual_information(x, y, cfg: MiConfig | None = None) -> float:
    """I(x; y) in bits."""
    cfg = cfg or MiConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    _check_length(x.size, cfg)
    return _mi_binned(quantile_bins(x, cfg.bins), quantile_bins(y, cfg.bins), cfg.bins)


def relevance_and_redundancy(X, y, cfg: MiConfig | None = None):
    """Relevance I(x_i; y) and the symmetric matrix I(x_i; x_j).

    The diagonal holds the binned entropy H(x_i).
    """
    cfg = cfg or MiConfig()
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    _check_length(n, cfg)
    B = np.column_stack([quantile_bins(X[:, j], cfg.bins) for j in range(d)])
    by = quantile_bins(y, cfg.bins)
    relevance = np.array([_mi_binned(B[:, j], by, cfg.bins) for j in range(d)])
    red = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            red[i, j] = red[j, i] = _mi_binned(B[:, i], B[:, j], cfg.bins)
    return relevance, red


def mrmr_rank(X, y, k: int | None = None, cfg: MiConfig | None = None) -> RankResult:
    """Greedy mRMR with the difference (MID) criterion.

    The first pick maximizes relevance; each next pick maximizes relevance
    minus the mean redundancy with the already selected set.  Ties go to
    the lower column index.
    """
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    k = d if k is None else int(k)
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    relevance, red = relevance_and_redundancy(X, y, cfg)
    selected = [int(np.argmax(relevance))]
    scores = [float(relevance[selected[0]])]
    remaining = np.ones(d, dtype=bool)
    remaining[selected[0]] = False
    red_sum = red[:, selected[0]].copy()
    while len(selected) < k:
        crit = relevance - red_sum / len(selected)
        crit[~remaining] = -np.inf
        j = int(np.argmax(crit))
        selected.append(j)
        scores.append(float(crit[j]))
        remaining[j] = False
        red_sum += red[:, j]
    return RankResult(np.array(selected), np.array(scores), relevance)


def pearson_matrix(X):
    """Pearson correlations with unit diagonal.

    Constant columns correlate 0 with everything else; their indices are
    returned as the second element.
    """
    X = np.asarray(X, dtype=float)
    Z = X - X.mean(axis=0)
    sd = np.sqrt((Z * Z).sum(axis=0))
    constant = np.flatnonzero(sd == 0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = Z / sd
    R = np.clip(Z.T @ Z, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R, tuple(int(i) for i in constant)


def save_ranking(result: RankResult, names, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "descriptor", "score", "relevance"))
        for r, (j, s) in enumerate(zip(result.order, result.scores), start=1):
            w.writerow((r, names[j], repr(float(s)), repr(float(result.relevance[j]))))


def save_matrix(R, names, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("", *names))
        for name, row in zip(names, R):
            w.writerow((name, *(repr(float(v)) for v in row)))
