"""Report figures rendered with the Agg backend.

Figures go to their own directory and are not part of the run manifest.
PNG metadata that would vary between runs (the software tag) is dropped.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectra import KINDS  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_fit_quality(records, path) -> Path:
    """R^2 distribution per feature kind."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    data = [[r.r2 for r in records if r.kind is k] or [np.nan] for k in KINDS]
    ax.boxplot(data, showfliers=True)
    ax.set_xticks(range(1, len(KINDS) + 1), [k.value for k in KINDS], rotation=30, ha="right")
    ax.set_ylabel("R$^2$")
    ax.set_title("Line-shape fit quality")
    return _save(fig, Path(path))


def plot_alpha_sweep(alphas, counts, alpha, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(alphas, counts, "o-")
    ax.axvline(alpha, color="0.5", ls="--", lw=1)
    ax.set_xlabel("alpha (LDOF weight)")
    ax.set_ylabel("flagged rows")
    return _save(fig, Path(path))


def plot_topk(curve: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for fam in sorted(curve):
        k, r2 = zip(*curve[fam])
        ax.plot(k, r2, "o-", label=fam, ms=3)
    ax.set_xlabel("top-k ranked descriptors")
    ax.set_ylabel("mean validation R$^2$")
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def plot_series(t, y, yhat, kan_t=None, kan=None, path="series.png") -> Path:
    """Target, out-of-fold prediction and the Kanazawa series over time."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    h = np.asarray(t) / 3600.0
    ax.plot(h, y, "k-", lw=1, label="target")
    ax.plot(h, yhat, ".", ms=3, label="impedance model (out of fold)")
    if kan_t is not None:
        ax.plot(np.asarray(kan_t) / 3600.0, kan, "-", lw=1, label="Kanazawa")
    ax.set_xlabel("time (h)")
    ax.set_ylabel("glycerol (%v/v)")
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def plot_cumulative_rmse(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report.thresholds, report.cum_kanazawa, "s-", label="Kanazawa")
    ax.plot(report.thresholds, report.cum_impedance, "o-", label="impedance line shape")
    ax.set_xlabel("threshold concentration (%v/v)")
    ax.set_ylabel("cumulative RMSE (%v/v)")
    ratio = np.array([np.nan if r is None else r for r in report.ratio], dtype=float)
    if np.isfinite(ratio).any():
        ax2 = ax.twinx()
        ax2.plot(report.thresholds, ratio, "k:", lw=1)
        ax2.set_ylabel("RMSE ratio (Kanazawa / impedance)")
    ax.legend(fontsize=7, loc="upper left")
    return _save(fig, Path(path))


def render_report(fig_dir, *, records=None, outlier=None, cv_report=None, matrix=None,
                  kan_points=None, compare_report=None) -> list:
    """Write every figure whose inputs are available; returns the paths."""
    from .regression import topk_curve
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = []
    if records:
        out.append(plot_fit_quality(records, fig_dir / "fit_quality.png"))
    if outlier is not None:
        out.append(plot_alpha_sweep(outlier.alphas, outlier.counts, outlier.alpha,
                                    fig_dir / "alpha_sweep.png"))
    if cv_report is not None:
        out.append(plot_topk(topk_curve(cv_report), fig_dir / "topk_curve.png"))
        if matrix is not None:
            kt = [p.timestamp for p in kan_points] if kan_points else None
            kv = [p.pct for p in kan_points] if kan_points else None
            out.append(plot_series(matrix.timestamps, matrix.y, cv_report.predictions, kt, kv,
                                   fig_dir / "predictions.png"))
    if compare_report is not None:
        out.append(plot_cumulative_rmse(compare_report, fig_dir / "cumulative_rmse.png"))
    return out
