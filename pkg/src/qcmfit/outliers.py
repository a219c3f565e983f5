"""Consensus outlier screening of descriptor rows.

Three detectors score every row: the local distance-based outlier factor
(LDOF), an isolation forest and a Mahalanobis distance under Ledoit-Wolf
shrinkage covariance.  Raw scores are mapped to [0, 1] by clipping at their
own 1st/99th percentiles, then fused as

    S = alpha*ldof + (1 - alpha)/2 * (iforest + mahalanobis)

and a row is flagged when S >= tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.covariance import LedoitWolf
from sklearn.ensemble import IsolationForest

DETECTORS = ("ldof", "iforest", "mahalanobis")


class KneeError(ValueError):
    """Raised when a count curve has no identifiable knee."""


@dataclass(frozen=True)
class ConsensusConfig:
    alpha: float = 0.6
    tau: float = 0.5
    ldof_k: int = 20
    trees: int = 100
    subsample: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ldof_k < 2:
            raise ValueError("ldof_k must be at least 2")

    @property
    def weights(self) -> tuple[float, float, float]:
        w = 0.5 * (1.0 - self.alpha)
        return self.alpha, w, w


@dataclass
class DetectorScores:
    """Raw and normalized scores, one array per detector, aligned with rows."""
    raw: dict
    normalized: dict

    @property
    def ldof(self):
        return self.normalized["ldof"]

    @property
    def iforest(self):
        return self.normalized["iforest"]

    @property
    def mahalanobis(self):
        return self.normalized["mahalanobis"]

    def __len__(self):
        return len(self.normalized["ldof"])


@dataclass
class ConsensusResult:
    S: np.ndarray
    flags: np.ndarray
    counts: dict = field(default_factory=dict)
    venn: dict = field(default_factory=dict)

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())


def standardize(X) -> np.ndarray:
    """Z-score columns; constant columns become zero."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - X.mean(axis=0)) / sd


# -- detectors ------------------------------------------------------------

def ldof_scores(X, k: int = 20) -> np.ndarray:
    """LDOF: mean distance to the k nearest neighbours over the mean
    pairwise distance among those neighbours.

    Rows whose neighbours all coincide get ``+inf``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 2 <= k < n:
        raise ValueError(f"LDOF needs 2 <= k < N, got k={k}, N={n}")
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    out = np.empty(n)
    for i in range(n):
        outer = D[i, nn[i]].mean()
        inner = pdist(X[nn[i]]).mean()
        out[i] = outer / inner if inner > 0 else np.inf
    return out


def iforest_scores(X, trees: int = 100, subsample: int = 256, seed: int = 0) -> np.ndarray:
    """Isolation score 2**(-E[h]/c(n)); larger is more anomalous."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 8:
        raise ValueError("isolation forest needs at least 8 rows")
    model = IsolationForest(n_estimators=trees, max_samples=min(subsample, X.shape[0]),
                            random_state=seed)
    model.fit(X)
    return -model.score_samples(X)


def mahalanobis_scores(X) -> np.ndarray:
    """Distance to the mean under Ledoit-Wolf shrinkage covariance."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] <= 2:
        raise ValueError("Mahalanobis scores need more than 2 rows")
    lw = LedoitWolf().fit(X)
    return np.sqrt(np.maximum(lw.mahalanobis(X), 0.0))


def normalize_scores(raw, q_low: float = 1.0, q_high: float = 99.0) -> np.ndarray:
    """Clip at the scores' own P1/P99 and min-max map to [0, 1].

    Infinite sentinels are clamped to the largest finite score first, so
    they end up at 1.
    """
    raw = np.asarray(raw, dtype=float)
    finite = np.isfinite(raw)
    if not finite.any():
        return np.zeros_like(raw)
    r = np.where(finite, raw, raw[finite].max())
    lo, hi = np.percentile(r, [q_low, q_high])
    if hi <= lo:
        return np.zeros_like(r)
    return (np.clip(r, lo, hi) - lo) / (hi - lo)


def detector_scores(X, cfg: ConsensusConfig | None = None) -> DetectorScores:
    """Run all three detectors on standardized columns of ``X``."""
    cfg = cfg or ConsensusConfig()
    Z = standardize(X)
    raw = {
        "ldof": ldof_scores(Z, min(cfg.ldof_k, Z.shape[0] - 1)),
        "iforest": iforest_scores(Z, cfg.trees, cfg.subsample, cfg.seed),
        "mahalanobis": mahalanobis_scores(Z),
    }
    return DetectorScores(raw, {name: normalize_scores(v) for name, v in raw.items()})


# -- fusion ---------------------------------------------------------------

def fuse(scores: DetectorScores, alpha: float) -> np.ndarray:
    w = 0.5 * (1.0 - alpha)
    return alpha * scores.ldof + w * (scores.iforest + scores.mahalanobis)


def detector_flags(scores: DetectorScores, fallback: float = 0.5, grid_points: int = 21) -> dict:
    """Binary flags per detector at each detector's own elbow threshold.

    The threshold is the knee of the flagged-count curve over a uniform grid
    of normalized-score cut-offs; ``fallback`` is used when that curve has
    no knee.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    out = {}
    for name in DETECTORS:
        s = scores.normalized[name]
        counts = np.array([(s >= t).sum() for t in grid])
        try:
            cut = grid[knee_index(grid, counts)]
        except KneeError:
            cut = fallback
        out[name] = s >= cut
    return out


def consensus(scores: DetectorScores, cfg: ConsensusConfig | None = None) -> ConsensusResult:
    cfg = cfg or ConsensusConfig()
    S = fuse(scores, cfg.alpha)
    flags = S >= cfg.tau
    binary = detector_flags(scores)
    venn = {name: frozenset(np.flatnonzero(b).tolist()) for name, b in binary.items()}
    any_single = np.zeros(len(S), dtype=bool)
    for b in binary.values():
        any_single |= b
    venn["consensus_only"] = frozenset(np.flatnonzero(flags & ~any_single).tolist())
    counts = {name: int(b.sum()) for name, b in binary.items()}
    counts["consensus"] = int(flags.sum())
    return ConsensusResult(S, flags, counts, venn)


# -- alpha selection ------------------------------------------------------

def alpha_sweep(scores: DetectorScores, alphas, tau: float = 0.5) -> np.ndarray:
    """Number of flagged rows for each alpha."""
    return np.array([int((fuse(scores, a) >= tau).sum()) for a in alphas])


def knee_index(x, y, tol: float = 1e-9) -> int:
    """Index of the point farthest from the chord joining the curve ends.

    Both axes are scaled to [0, 1] first.  Raises :class:`KneeError` for a
    flat or straight curve.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3 or x.size != y.size:
        raise KneeError("need at least three aligned points")
    if np.ptp(y) == 0 or np.ptp(x) == 0:
        raise KneeError("flat curve has no knee")
    xn = (x - x.min()) / np.ptp(x)
    yn = (y - y.min()) / np.ptp(y)
    p0 = np.array([xn[0], yn[0]])
    chord = np.array([xn[-1], yn[-1]]) - p0
    chord /= np.linalg.norm(chord)
    rel = np.column_stack([xn, yn]) - p0
    dist = np.abs(rel[:, 0] * chord[1] - rel[:, 1] * chord[0])
    i = int(np.argmax(dist))
    if dist[i] <= tol:
        raise KneeError("curve is straight; no knee")
    return i


def elbow_alpha(alphas, counts) -> float:
    """Alpha at the knee of the count-vs-alpha curve."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size < 5 or np.any(np.diff(alphas) <= 0):
        raise ValueError("alpha grid must be increasing with at least 5 points")
    try:
        return float(alphas[knee_index(alphas, counts)])
    except KneeError as exc:
        raise KneeError(f"{exc}; choose alpha manually") from None


# -- synthetic data -------------------------------------------------------

def contaminated_blob(n: int = 648, d: int = 10, fraction: float = 0.05, seed: int = 0,
                      box: float = 10.0, min_radius: float = 6.0):
    """Gaussian inliers plus uniformly scattered far outliers.

    Outliers are drawn uniformly from ``[-box, box]**d`` and rejected until
    their norm exceeds ``min_radius`` standard deviations beyond the typical
    inlier radius sqrt(d).  Returns ``(X, is_outlier)`` with rows shuffled.
    """
    rng = np.random.default_rng(seed)
    n_out = int(round(fraction * n))
    inliers = rng.standard_normal((n - n_out, d))
    outliers = []
    while len(outliers) < n_out:
        cand = rng.uniform(-box, box, d)
        if np.linalg.norm(cand) > np.sqrt(d) + min_radius:
            outliers.append(cand)
    X = np.vstack([inliers, np.array(outliers).reshape(n_out, d)])
    truth = np.r_[np.zeros(n - n_out, bool), np.ones(n_out, bool)]
    order = rng.permutation(n)
    return X[order], truth[order]


def save_report(scores: DetectorScores, result: ConsensusResult, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "ldof", "iforest", "mahalanobis", "S", "flag"))
        for i in range(len(result.S)):
            w.writerow((i, repr(float(scores.ldof[i])), repr(float(scores.iforest[i])),
                        repr(float(scores.mahalanobis[i])), repr(float(result.S[i])),
                        int(result.flags[i])))


def load_flags(path) -> np.ndarray:
    """Boolean flag column of an outlier report."""
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([row["flag"] == "1" for row in rows], dtype=bool)


def save_alpha_sweep(alphas, counts, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("alpha", "count"))
        for a, c in zip(alphas, counts):
            w.writerow((repr(float(a)), int(c)))
