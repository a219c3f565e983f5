"""End-to-end orchestration: simulate, fit, screen, rank, train, baseline, compare.

Every stage writes plain CSV/JSON into one output directory.  Files are
first written with a ``.partial`` suffix and renamed once the stage
completes, so a failed stage leaves its partial output behind for
inspection.  A ``manifest.json`` records content hashes of inputs and
artifacts, the derived stage seeds and library versions; two runs with the
same configuration produce byte-identical manifests.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bvd, features, kanazawa, lineshape, outliers, regression
from .spectra import (
    KINDS,
    DescriptorMatrix,
    FeatureKind,
    assemble_round,
    derive_observables,
    group_rounds,
    load_sweeps,
    save_descriptors,
    save_sweeps,
)

STAGES = ("simulate", "fit", "outliers", "rank", "train", "kanazawa", "compare")
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


class ConfigError(ValueError):
    """Invalid configuration or unreadable input; raised before any stage runs."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration --------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    skip_simulate: bool = False
    sweeps: str = ""
    targets: str = ""
    figures: bool = True


@dataclass
class SimulateConfig:
    rounds: int = 200
    noise_rel: float = 0.01
    sweeps_per_period: int = 100
    peak_to_peak: float = 50.0
    rl_ratio: float = 1.0
    linewidth_multiple: float = 2.0  # <= 0 keeps the instrument spans
    R_m: float = 5.0
    L_m: float = 9e-3
    C_m: float = 28e-15
    C_0: float = 5e-12


@dataclass
class FitConfig:
    bounded: bool = True
    bounds: str = ""
    qc_threshold: float = 0.95
    q_low: float = 2.0
    q_high: float = 98.0
    max_iter: int = 200


@dataclass
class OutlierConfig:
    enabled: bool = True
    alpha: float = 0.6
    tau: float = 0.5
    auto_alpha: bool = False
    ldof_k: int = 20
    trees: int = 100
    subsample: int = 256


@dataclass
class RankConfig:
    enabled: bool = True
    bins: int = 8


@dataclass
class TrainConfig:
    enabled: bool = True
    folds: int = 5
    k_grid: tuple = (1, 2, 3, 5, 10, 20, 30, 40, 52)
    families: tuple = regression.FAMILIES


@dataclass
class KanazawaConfig:
    enabled: bool = True
    calibration: str = ""
    f0: float = 1e7
    rho_q: float = 2650.0
    mu_q: float = 2.947e10


@dataclass
class CompareConfig:
    enabled: bool = True
    step: float = 0.25


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    outliers: OutlierConfig = field(default_factory=OutlierConfig)
    rank: RankConfig = field(default_factory=RankConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kanazawa: KanazawaConfig = field(default_factory=KanazawaConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def flat(self) -> dict:
        out = {}
        for sec in fields(self):
            for key, val in asdict(getattr(self, sec.name)).items():
                out[f"{sec.name}.{key}"] = list(val) if isinstance(val, tuple) else val
        return out


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def apply_overrides(cfg: PipelineConfig, pairs: dict) -> PipelineConfig:
    """Return a copy of ``cfg`` with ``{"stage.field": "text"}`` applied."""
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, text in pairs.items():
        stage, _, name = key.partition(".")
        if stage not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        sec = sections[stage]
        if name not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        value = text if not isinstance(text, str) else _coerce(getattr(sec, name), text, key)
        sections[stage] = replace(sec, **{name: value})
    return PipelineConfig(**sections)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = apply_overrides(cfg, parse_config_text(text, str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    """Check values and that every referenced input exists."""
    if cfg.run.threads < 1:
        raise ConfigError("run.threads must be at least 1")
    if cfg.run.skip_simulate:
        for key in ("sweeps", "targets"):
            p = getattr(cfg.run, key)
            if not p:
                raise ConfigError(f"run.{key} is required with skip_simulate")
            if not Path(p).is_file():
                raise ConfigError(f"run.{key}: no such file {p}")
    for key, p in (("fit.bounds", cfg.fit.bounds), ("kanazawa.calibration", cfg.kanazawa.calibration)):
        if p and not Path(p).is_file():
            raise ConfigError(f"{key}: no such file {p}")
    unknown = set(cfg.train.families) - set(regression.FAMILIES)
    if unknown:
        raise ConfigError(f"train.families: unknown {sorted(unknown)}")
    if not cfg.train.families or not cfg.train.k_grid:
        raise ConfigError("train.families and train.k_grid must be non-empty")
    if cfg.compare.step <= 0:
        raise ConfigError("compare.step must be positive")
    try:
        outliers.ConsensusConfig(alpha=cfg.outliers.alpha, tau=cfg.outliers.tau,
                                 ldof_k=cfg.outliers.ldof_k)
        regression.CvConfig(folds=cfg.train.folds, k_grid=cfg.train.k_grid)
        features.MiConfig(cfg.rank.bins)
        bvd.LoadSchedule(rounds=cfg.simulate.rounds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.simulate.rounds < 1:
        raise ConfigError("simulate.rounds must be positive")


def stage_seed(master: int, stage: str) -> int:
    """32-bit seed for ``stage`` derived from the master seed."""
    digest = hashlib.sha256(f"{int(master)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- small IO helpers -------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _num(v):
    """JSON-safe float: NaN and infinities become None."""
    v = float(v)
    return v if math.isfinite(v) else None


class StageFiles:
    """Collects a stage's outputs under ``.partial`` names until commit."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.out_dir / (name + ".partial")

    def commit(self) -> list[str]:
        for name in self.names:
            (self.out_dir / (name + ".partial")).replace(self.out_dir / name)
        return list(self.names)


# -- stage: simulate ----------------------------------------------------------

def simulate_stage(cfg: SimulateConfig, seed: int):
    p = bvd.BvdParams(cfg.R_m, cfg.L_m, cfg.C_m, cfg.C_0)
    schedule = bvd.LoadSchedule(cfg.sweeps_per_period, cfg.peak_to_peak, cfg.rounds,
                                cfg.noise_rel, cfg.rl_ratio)
    multiple = cfg.linewidth_multiple if cfg.linewidth_multiple > 0 else None
    windows = bvd.simulation_windows(p, bvd.window_spans(p, multiple))
    return bvd.generate_dataset(p, schedule, windows=windows, seed=seed)


# -- stage: fit -------------------------------------------------------------

@dataclass
class FitOutcome:
    matrix: DescriptorMatrix
    records: list
    unbounded: list
    bounds: lineshape.FitBounds | None
    failures: list
    drops: list
    dropped_rounds: list


def round_targets(sweeps, target_t, target_y) -> dict:
    """Round -> (timestamp, target); the round timestamp is its first sweep's.

    Targets are linearly interpolated onto round timestamps, which is exact
    when the target file was written at those timestamps.
    """
    target_t = np.asarray(target_t, dtype=float)
    target_y = np.asarray(target_y, dtype=float)
    if target_t.size == 0:
        raise ValueError("target series is empty")
    if np.any(np.diff(target_t) <= 0):
        raise ValueError("target timestamps must be strictly increasing")
    out = {}
    for r, group in group_rounds(sweeps).items():
        t = min(s.timestamp for s in group.values())
        if not target_t[0] <= t <= target_t[-1]:
            raise ValueError(f"round {r} at t={t} s lies outside the target series "
                             f"[{target_t[0]}, {target_t[-1]}] s")
        out[r] = (t, float(np.interp(t, target_t, target_y)))
    return out


def _sort_key(rec):
    return rec.round_index, KINDS.index(rec.kind)


def _fit_chunk(args):
    sweeps, bounds, stats, init, max_iter = args
    return lineshape.fit_sweeps(sweeps, bounds, stats=stats, init=init, max_iter=max_iter)


def fit_many(sweeps, bounds=None, *, stats=None, init=None, max_iter=200, threads=1):
    """:func:`lineshape.fit_sweeps` spread over processes.

    Each fit is seeded by its (round, kind), so results do not depend on
    the number of workers.
    """
    stats = stats or lineshape.sweep_stats(sweeps)
    if threads <= 1 or len(sweeps) < 2 * threads:
        records, failures = lineshape.fit_sweeps(sweeps, bounds, stats=stats, init=init,
                                                 max_iter=max_iter)
    else:
        chunks = [(sweeps[i::threads], bounds, stats, init, max_iter) for i in range(threads)]
        records, failures = [], []
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rec, fail in pool.map(_fit_chunk, chunks):
                records.extend(rec)
                failures.extend(fail)
    records.sort(key=_sort_key)
    failures.sort(key=lambda f: (f[0], KINDS.index(f[1])))
    return records, failures


def fit_stage(sweeps, targets: dict, cfg: FitConfig, bounds=None, threads: int = 1) -> FitOutcome:
    """Fit all sweeps and assemble complete, QC-passing rounds.

    Without explicit ``bounds`` and with ``cfg.bounded`` set, sweeps are
    first fitted unbounded, bounds are taken from those fits' percentiles
    and every sweep is refitted inside them, warm-started from its
    unbounded solution.
    """
    stats = lineshape.sweep_stats(sweeps)
    failures = []
    unbounded = []
    if bounds is None:
        unbounded, fails = fit_many(sweeps, stats=stats, max_iter=cfg.max_iter, threads=threads)
        failures += [(r, k, "unbounded", msg) for r, k, msg in fails]
        if cfg.bounded:
            bounds = lineshape.derive_bounds(unbounded, cfg.q_low, cfg.q_high)
    if bounds is not None:
        init = {(rec.round_index, rec.kind): rec.values for rec in unbounded}
        records, fails = fit_many(sweeps, bounds, stats=stats, init=init or None,
                                  max_iter=cfg.max_iter, threads=threads)
        failures += [(r, k, "bounded", msg) for r, k, msg in fails]
    else:
        records = unbounded
    kept, drops = lineshape.qc_filter(records, cfg.qc_threshold)
    by_round: dict = {}
    for rec in kept:
        by_round.setdefault(rec.round_index, []).append(rec)
    rows, dropped = [], []
    for r in sorted(group_rounds(sweeps)):
        recs = by_round.get(r, [])
        if len(recs) != len(KINDS) or r not in targets:
            dropped.append(r)
            continue
        t, y = targets[r]
        rows.append((assemble_round(recs, y, t), y, t, r))
    return FitOutcome(DescriptorMatrix.from_rows(rows), records, unbounded, bounds,
                      failures, drops, dropped)


def save_fit_report(records, failures, path) -> None:
    rows = [(rec.round_index, rec.kind.value, repr(float(rec.r2)), int(rec.bounded),
             " ".join(str(i) for i in rec.active_bounds)) for rec in records]
    rows += [(r, k.value, "nan", int(stage == "bounded"), "") for r, k, stage, _ in failures]
    rows.sort(key=lambda row: (row[0], KINDS.index(FeatureKind(row[1]))))
    _write_csv(path, ("round", "kind", "r2", "bounded", "active_bounds"), rows)


def save_qc_report(drops, failures, path) -> None:
    rows = [(d.round_index, d.kind.value, repr(float(d.r2)), "r2_below_threshold") for d in drops]
    rows += [(r, k.value, "nan", f"{stage} fit failed: {msg}") for r, k, stage, msg in failures]
    rows.sort(key=lambda row: (row[0], KINDS.index(FeatureKind(row[1]))))
    _write_csv(path, ("round", "kind", "r2", "reason"), rows)


def load_fit_report(path):
    """Rows of a fit report as dicts with typed ``round`` and ``r2``."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append({"round": int(row["round"]), "kind": FeatureKind(row["kind"]),
                            "r2": float(row["r2"])})
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed fit report row ({exc})") from None
    return out


def bounds_from_descriptors(matrix: DescriptorMatrix, q_low=2.0, q_high=98.0):
    """Per-kind percentile bounds from the columns of an unbounded descriptor table."""
    records = []
    offset = 0
    for kind in KINDS:
        n = len(kind.suffixes)
        cols = matrix.X[:, offset:offset + n]
        offset += n
        for r, vals in zip(matrix.rounds, cols):
            params = (lineshape.LorentzQuad(*vals) if kind is FeatureKind.G
                      else lineshape.GaussianPair(*vals))
            records.append(lineshape.FitRecord(kind, params, 1.0, round_index=int(r)))
    return lineshape.derive_bounds(records, q_low, q_high)


# -- stage: outliers --------------------------------------------------------

@dataclass
class OutlierOutcome:
    scores: outliers.DetectorScores
    result: outliers.ConsensusResult
    alpha: float
    alphas: tuple
    counts: np.ndarray
    note: str = ""

    def summary(self) -> dict:
        n = len(self.result.S)
        return {
            "alpha": self.alpha,
            "rows": n,
            "flagged": self.result.n_flagged,
            "flagged_fraction": self.result.n_flagged / n if n else 0.0,
            "counts": dict(sorted(self.result.counts.items())),
            "venn": {k: len(v) for k, v in sorted(self.result.venn.items())},
            "note": self.note,
        }


def outlier_stage(X, cfg: OutlierConfig, seed: int) -> OutlierOutcome:
    ccfg = outliers.ConsensusConfig(cfg.alpha, cfg.tau, cfg.ldof_k, cfg.trees, cfg.subsample, seed)
    scores = outliers.detector_scores(X, ccfg)
    counts = outliers.alpha_sweep(scores, ALPHA_GRID, cfg.tau)
    alpha, note = cfg.alpha, ""
    if cfg.auto_alpha:
        try:
            alpha = outliers.elbow_alpha(ALPHA_GRID, counts)
        except outliers.KneeError as exc:
            note = f"auto alpha unavailable ({exc}); kept alpha={cfg.alpha}"
        ccfg = replace(ccfg, alpha=alpha)
    return OutlierOutcome(scores, outliers.consensus(scores, ccfg), alpha, ALPHA_GRID, counts, note)


# -- stage: train -----------------------------------------------------------

def train_stage(matrix: DescriptorMatrix, cfg: TrainConfig, bins: int, seed: int):
    specs = regression.default_specs(cfg.families, seed)
    cv = regression.CvConfig(cfg.folds, seed, tuple(cfg.k_grid), bins)
    return regression.cross_validate(matrix.X, matrix.y, specs, cv)


# -- stage: kanazawa --------------------------------------------------------

def kanazawa_stage(sweeps, cfg: KanazawaConfig):
    """Kanazawa series on conductance sweeps, stamped with round timestamps."""
    cal = (kanazawa.ViscosityCalibration.from_csv(cfg.calibration) if cfg.calibration
           else kanazawa.ViscosityCalibration.default())
    c = kanazawa.CrystalConstants(cfg.f0, cfg.rho_q, cfg.mu_q)
    items = []
    for r, group in group_rounds(sweeps).items():
        g = group.get(FeatureKind.G)
        if g is None:
            continue
        t = min(s.timestamp for s in group.values())
        items.append((r, t, derive_observables(g, "G")))
    return kanazawa.kanazawa_predict(items, c, cal)


# -- stage: compare -----------------------------------------------------------

@dataclass
class CompareReport:
    rmse_impedance: float
    rmse_kanazawa: float
    thresholds: np.ndarray
    n: np.ndarray
    cum_impedance: np.ndarray
    cum_kanazawa: np.ndarray
    ratio: list  # float, or None where the impedance RMSE is zero
    joined: int
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rmse_impedance": _num(self.rmse_impedance),
            "rmse_kanazawa": _num(self.rmse_kanazawa),
            "joined_rows": self.joined,
            "thresholds": [_num(t) for t in self.thresholds],
            "n": [int(v) for v in self.n],
            "cumulative_rmse_impedance": [_num(v) for v in self.cum_impedance],
            "cumulative_rmse_kanazawa": [_num(v) for v in self.cum_kanazawa],
            "ratio": ["undefined" if r is None else _num(r) for r in self.ratio],
            "notes": list(self.notes),
        }


def threshold_grid(y_max: float, step: float = 0.25) -> np.ndarray:
    """``step, 2*step, ...`` up to ``y_max``, closed with ``y_max`` itself."""
    n = int(math.floor(y_max / step + 1e-9))
    grid = step * np.arange(1, n + 1)
    if grid.size == 0 or grid[-1] < y_max - 1e-9:
        grid = np.append(grid, y_max)
    return grid


def nearest_join(t_left, t_right, max_gap: float) -> np.ndarray:
    """Index into ``t_right`` of the nearest timestamp for each left row, or -1."""
    t_left = np.asarray(t_left, dtype=float)
    t_right = np.asarray(t_right, dtype=float)
    out = np.full(t_left.size, -1)
    if t_right.size == 0:
        return out
    order = np.argsort(t_right, kind="stable")
    ts = t_right[order]
    pos = np.clip(np.searchsorted(ts, t_left), 1, max(ts.size - 1, 1))
    lo = np.clip(pos - 1, 0, ts.size - 1)
    hi = np.clip(pos, 0, ts.size - 1)
    pick = np.where(np.abs(ts[hi] - t_left) < np.abs(t_left - ts[lo]), hi, lo)
    ok = np.abs(ts[pick] - t_left) <= max_gap
    out[ok] = order[pick[ok]]
    return out


def compare(pred_t, pred, target, kan_t, kan, step: float = 0.25,
            interval: float | None = None) -> CompareReport:
    """Cumulative RMSE of both predictors against the target.

    Impedance rows are joined to the nearest Kanazawa reading within half a
    round interval (estimated from the Kanazawa timestamps when not given).
    """
    pred_t = np.asarray(pred_t, dtype=float)
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    kan_t = np.asarray(kan_t, dtype=float)
    kan = np.asarray(kan, dtype=float)
    if not pred_t.size == pred.size == target.size:
        raise ValueError("prediction, target and timestamp columns must align")
    if interval is None:
        gaps = np.diff(np.unique(kan_t))
        interval = float(np.median(gaps)) if gaps.size else math.inf
    idx = nearest_join(pred_t, kan_t, 0.5 * interval)
    ok = idx >= 0
    notes = []
    if not ok.any():
        raise ValueError("no impedance row has a Kanazawa reading within half a round interval")
    if (~ok).any():
        notes.append(f"{int((~ok).sum())} rows without a Kanazawa reading were left out")
    y, p_imp, p_kan = target[ok], pred[ok], kan[idx[ok]]
    grid = threshold_grid(float(y.max()), step)
    n = np.array([int((y <= t).sum()) for t in grid])
    keep = n > 0
    if (~keep).any():
        notes.append("thresholds with no rows omitted: "
                     + ", ".join(f"{t:g}" for t in grid[~keep]))
    grid, n = grid[keep], n[keep]
    cum_i = regression.cumulative_rmse(y, p_imp, grid)
    cum_k = regression.cumulative_rmse(y, p_kan, grid)
    ratio = [None if a == 0 else float(b / a) for a, b in zip(cum_i, cum_k)]
    if any(r is None for r in ratio):
        notes.append("ratio undefined where the impedance RMSE is zero")
    rmse = lambda a: float(np.sqrt(np.mean((y - a) ** 2)))  # noqa: E731
    return CompareReport(rmse(p_imp), rmse(p_kan), grid, n, cum_i, cum_k, ratio, int(ok.sum()), notes)


def save_compare(report: CompareReport, csv_path, json_path=None) -> None:
    rows = []
    for t, n, a, b, r in zip(report.thresholds, report.n, report.cum_impedance,
                             report.cum_kanazawa, report.ratio):
        rows.append((repr(float(t)), int(n), repr(float(a)), repr(float(b)),
                     "undefined" if r is None else repr(float(r))))
    _write_csv(csv_path, ("threshold_pct", "n", "rmse_impedance", "rmse_kanazawa", "ratio"), rows)
    if json_path is not None:
        _write_json(json_path, report.to_dict())


def load_oof_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["target"]) for r in rows]),
            np.array([float(r["oof_prediction"]) for r in rows]))


# -- manifest ---------------------------------------------------------------

def library_versions() -> dict:
    import scipy
    import sklearn
    from importlib import metadata
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__, "qcmfit": own}


def write_manifest(out_dir: Path, cfg: PipelineConfig, seeds: dict, inputs: dict,
                   artifacts: list, stages: list) -> Path:
    """Hash inputs and artifacts into ``manifest.json``.

    Paths are stored by file name so that the manifest does not depend on
    the output location; figures are not listed.
    """
    flat = cfg.flat()
    flat.pop("run.out_dir")
    doc = {
        "config": flat,
        "seeds": seeds,
        "versions": library_versions(),
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "artifacts": {name: sha256_file(out_dir / name) for name in sorted(artifacts)},
        "stages": stages,
    }
    path = out_dir / "manifest.json"
    _write_json(path, doc)
    return path


# -- driver -----------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    report: CompareReport | None
    artifacts: list
    figures: list
    summary: dict


def _stage(name, out_dir, artifacts, stages, fn):
    files = StageFiles(out_dir)
    try:
        value = fn(files)
    except Exception as exc:  # every stage failure is reported the same way
        raise StageError(name, exc) from exc
    artifacts.extend(files.commit())
    stages.append(name)
    return value


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run the enabled stages in order and write every artifact to ``run.out_dir``."""
    validate_config(cfg)
    out = Path(cfg.run.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    for stale in out.glob("*.partial"):
        stale.unlink()
    master = cfg.run.seed
    seeds = {"master": master, **{s: stage_seed(master, s) for s in ("simulate", "outliers", "train")}}
    artifacts: list = []
    stages: list = []
    inputs: dict = {}
    summary: dict = {}

    if cfg.run.skip_simulate:
        inputs = {Path(cfg.run.sweeps).name: cfg.run.sweeps, Path(cfg.run.targets).name: cfg.run.targets}

        def ingest(files):
            sweeps = load_sweeps(cfg.run.sweeps)
            t, y = bvd.load_targets(cfg.run.targets)
            return sweeps, t, y
        sweeps, target_t, target_y = _stage("ingest", out, artifacts, stages, ingest)
    else:
        def simulate(files):
            sweeps, rounds = simulate_stage(cfg.simulate, seeds["simulate"])
            save_sweeps(sweeps, files.path("sweeps.csv"))
            bvd.save_targets(rounds, files.path("targets.csv"))
            return sweeps, np.array([r.timestamp for r in rounds]), np.array([r.target for r in rounds])
        sweeps, target_t, target_y = _stage("simulate", out, artifacts, stages, simulate)

    if cfg.fit.bounds:
        inputs[Path(cfg.fit.bounds).name] = cfg.fit.bounds
    if cfg.kanazawa.calibration:
        inputs[Path(cfg.kanazawa.calibration).name] = cfg.kanazawa.calibration

    def fit(files):
        targets = round_targets(sweeps, target_t, target_y)
        bounds = lineshape.load_bounds(cfg.fit.bounds) if cfg.fit.bounds else None
        res = fit_stage(sweeps, targets, cfg.fit, bounds, cfg.run.threads)
        if res.matrix.rows == 0:
            raise ValueError("no round survived fitting and QC")
        final = "bounded" if res.bounds is not None else "unbounded"
        save_fit_report(res.records, [f for f in res.failures if f[2] == final],
                        files.path("fit_report.csv"))
        if res.unbounded and res.bounds is not None:
            save_fit_report(res.unbounded, [f for f in res.failures if f[2] == "unbounded"],
                            files.path("fit_report_unbounded.csv"))
        if res.bounds is not None:
            lineshape.save_bounds(res.bounds, files.path("bounds.csv"))
        save_qc_report(res.drops, res.failures, files.path("qc_report.csv"))
        save_descriptors(res.matrix, files.path("descriptors.csv"))
        return res
    fitted = _stage("fit", out, artifacts, stages, fit)
    summary["fit"] = {"rounds": len(group_rounds(sweeps)), "rows": fitted.matrix.rows,
                      "dropped_rounds": fitted.dropped_rounds, "qc_drops": len(fitted.drops),
                      "fit_failures": len(fitted.failures),
                      "min_r2": _num(min(rec.r2 for rec in fitted.records))}
    matrix = fitted.matrix

    screened = None
    if cfg.outliers.enabled:
        def screen(files):
            res = outlier_stage(matrix.X, cfg.outliers, seeds["outliers"])
            outliers.save_report(res.scores, res.result, files.path("outlier_report.csv"))
            outliers.save_alpha_sweep(res.alphas, res.counts, files.path("alpha_sweep.csv"))
            clean = matrix.subset(~res.result.flags)
            save_descriptors(clean, files.path("descriptors_clean.csv"))
            _write_json(files.path("outlier_summary.json"), res.summary())
            return res, clean
        screened, matrix = _stage("outliers", out, artifacts, stages, screen)
        summary["outliers"] = screened.summary()

    if cfg.rank.enabled:
        def rank(files):
            res = features.mrmr_rank(matrix.X, matrix.y, cfg=features.MiConfig(cfg.rank.bins))
            R, _ = features.pearson_matrix(matrix.X)
            features.save_ranking(res, matrix.names, files.path("ranking.csv"))
            features.save_matrix(R, matrix.names, files.path("correlation.csv"))
            return res
        ranking = _stage("rank", out, artifacts, stages, rank)
        summary["rank"] = {"top": ranking.names(matrix.names)[:10]}

    cv_report = None
    if cfg.train.enabled:
        def train(files):
            rep = train_stage(matrix, cfg.train, cfg.rank.bins, seeds["train"])
            files.path("cv_report.json").write_text(rep.to_json(matrix.names) + "\n")
            regression.save_topk_curve(regression.topk_curve(rep), files.path("topk_curve.csv"))
            regression.save_predictions(matrix.y, rep.predictions, files.path("predictions.csv"))
            return rep
        cv_report = _stage("train", out, artifacts, stages, train)
        summary["train"] = {"best": {"family": cv_report.best[0], "k": cv_report.best[1]},
                            **{k: _num(v) for k, v in cv_report.aggregates[cv_report.best].items()}}

    kan_points = None
    if cfg.kanazawa.enabled:
        def baseline(files):
            points, skipped = kanazawa_stage(sweeps, cfg.kanazawa)
            kanazawa.save_predictions(points, files.path("kanazawa_predictions.csv"))
            return points, skipped
        kan_points, skipped = _stage("kanazawa", out, artifacts, stages, baseline)
        summary["kanazawa"] = {"points": len(kan_points), "skipped": [r for r, _ in skipped],
                               "clamped": sum(p.clamped for p in kan_points)}

    report = None
    if cfg.compare.enabled and cv_report is not None and kan_points is not None:
        def comp(files):
            rep = compare(matrix.timestamps, cv_report.predictions, matrix.y,
                          [p.timestamp for p in kan_points], [p.pct for p in kan_points],
                          cfg.compare.step)
            save_compare(rep, files.path("compare.csv"), files.path("compare.json"))
            return rep
        report = _stage("compare", out, artifacts, stages, comp)

    def finish(files):
        _write_json(files.path("summary.json"), summary)
    _stage("summary", out, artifacts, stages, finish)

    figures = []
    if cfg.run.figures:
        from . import plotting
        figures = _stage("figures", out, [], stages, lambda files: plotting.render_report(
            out / "figures", records=fitted.records, outlier=screened, cv_report=cv_report,
            matrix=matrix, kan_points=kan_points, compare_report=report))
    write_manifest(out, cfg, seeds, inputs, artifacts, stages)
    return PipelineResult(out, report, artifacts, figures, summary)
