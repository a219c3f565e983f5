"""Small builders shared across test modules."""

import numpy as np

from qcmfit import bvd
from qcmfit.pipeline import load_config
from qcmfit.spectra import KINDS, FrequencySweep

# reduced synthetic configuration for the end-to-end checks
PIPELINE_OVERRIDES = {
    "simulate.rounds": "200",
    "simulate.noise_rel": "0.01",
    "run.seed": "0",
}


def make_pipeline_config(out_dir, **extra):
    pairs = dict(PIPELINE_OVERRIDES, **{"run.out_dir": str(out_dir)})
    pairs.update(extra)
    return load_config(overrides=pairs)


def constant_sweep(z, kind=KINDS[0], round_index=0, timestamp=0.0):
    f = np.linspace(1e7, 1e7 + 999.0, 1000)
    return FrequencySweep(kind, round_index, timestamp, f, np.full(f.size, z, dtype=complex))


def bvd_sweep(kind, p=None, round_index=0, timestamp=0.0, window=None):
    p = p or bvd.BvdParams()
    w = window or bvd.simulation_windows(p)[kind]
    f = w.grid()
    return FrequencySweep(kind, round_index, timestamp, f, bvd.bvd_impedance(p, f))


# alpha-vs-count curve with its corner at index 4 (slope -25 turns to -15, then -1);
# hand-computed distances to the chord put the maximum there
CANNED_KNEE = ((0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
               (100, 75, 50, 25, 10, 9, 8, 7, 6, 5, 4), 4)


def venn_scores(n=200, seed=0):
    """Normalized detector scores with a bulk on [0, 0.7], ten clear outliers
    near 1 and row 0 at (0.45, 0.6, 0.6).  Each detector's elbow lands at 0.7,
    so no binary rule flags row 0."""
    from qcmfit.outliers import DETECTORS, DetectorScores
    r = np.random.default_rng(seed)
    norm = {d: np.r_[r.uniform(0, 0.7, n - 10), r.uniform(0.9, 1.0, 10)] for d in DETECTORS}
    norm["ldof"][0], norm["iforest"][0], norm["mahalanobis"][0] = 0.45, 0.6, 0.6
    return DetectorScores({k: v.copy() for k, v in norm.items()}, norm)


def brute_force_mrmr(X, y, bins=8):
    """Reference mRMR order: bins from argsort ranks, MI from sklearn's
    contingency estimate, and every candidate scored from scratch at each
    step (no running sums)."""
    from sklearn.metrics import mutual_info_score

    def binned(v):
        ranks = np.empty(v.size)
        ranks[np.argsort(v, kind="stable")] = np.arange(v.size)
        return np.minimum((ranks * bins / v.size).astype(int), bins - 1)

    def mi(a, b):
        return mutual_info_score(a, b) / np.log(2.0)

    cols = [binned(X[:, j]) for j in range(X.shape[1])]
    by = binned(y)
    rel = [mi(c, by) for c in cols]
    chosen = []
    while len(chosen) < len(cols):
        best, best_val = None, -np.inf
        for j in range(len(cols)):
            if j in chosen:
                continue
            val = rel[j] if not chosen else rel[j] - np.mean([mi(cols[j], cols[s]) for s in chosen])
            if val > best_val + 1e-12:
                best, best_val = j, val
        chosen.append(best)
    return chosen
