"""Sweep data model, derived electrical observables and descriptor tables.

A *sweep* is one 1000-point complex-impedance acquisition inside the
frequency window of a single resonance feature.  A *round* is the set of
nine sweeps (one per :class:`FeatureKind`) taken at one time point.  Fitted
line-shape parameters of a round are flattened into a 52-column descriptor
row.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

N_POINTS = 1000

GAUSS_SUFFIXES = ("a1", "b1", "c1", "a2", "b2", "c2")
LORENTZ_SUFFIXES = ("a", "b", "c", "d")


class FeatureKind(str, enum.Enum):
    B_peak = "B_peak"
    B_trough = "B_trough"
    Z_theta = "Z_theta"
    Zabs_trough = "Zabs_trough"
    Zabs_peak = "Zabs_peak"
    X_peak = "X_peak"
    X_trough = "X_trough"
    R = "R"
    G = "G"

    @property
    def observable(self) -> str:
        return _OBSERVABLE[self]

    @property
    def mode(self) -> str:
        """'max' for peaks, 'min' for troughs."""
        return _MODE[self]

    @property
    def suffixes(self) -> tuple[str, ...]:
        return LORENTZ_SUFFIXES if self is FeatureKind.G else GAUSS_SUFFIXES


KINDS: tuple[FeatureKind, ...] = tuple(FeatureKind)

_OBSERVABLE = {
    FeatureKind.B_peak: "B",
    FeatureKind.B_trough: "B",
    FeatureKind.Z_theta: "theta",
    FeatureKind.Zabs_trough: "absZ",
    FeatureKind.Zabs_peak: "absZ",
    FeatureKind.X_peak: "X",
    FeatureKind.X_trough: "X",
    FeatureKind.R: "R",
    FeatureKind.G: "G",
}

_MODE = {
    FeatureKind.B_peak: "max",
    FeatureKind.B_trough: "min",
    FeatureKind.Z_theta: "max",
    FeatureKind.Zabs_trough: "min",
    FeatureKind.Zabs_peak: "max",
    FeatureKind.X_peak: "max",
    FeatureKind.X_trough: "min",
    FeatureKind.R: "max",
    FeatureKind.G: "max",
}

OBSERVABLES = ("R", "X", "absZ", "theta", "G", "B")

DESCRIPTOR_NAMES: tuple[str, ...] = tuple(
    f"{kind.value}.{suffix}" for kind in KINDS for suffix in kind.suffixes
)
assert len(DESCRIPTOR_NAMES) == 52


class SpectraError(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    kind: FeatureKind
    span: float
    center: float
    tracking: bool = True

    def __post_init__(self):
        if not self.span > 0:
            raise SpectraError(f"window span must be positive, got {self.span}")

    def grid(self, n: int = N_POINTS) -> np.ndarray:
        half = 0.5 * self.span
        return np.linspace(self.center - half, self.center + half, n)


# Acquisition windows used on the 10 MHz crystal (span Hz, center Hz).
_TABLE_WINDOWS = {
    FeatureKind.B_peak: (3_000.0, 10_008_449.0),
    FeatureKind.B_trough: (3_000.0, 10_014_600.0),
    FeatureKind.Z_theta: (5_000.0, 10_011_947.0),
    FeatureKind.Zabs_trough: (5_000.0, 10_008_836.0),
    FeatureKind.Zabs_peak: (5_000.0, 10_015_060.0),
    FeatureKind.X_peak: (5_000.0, 10_009_210.0),
    FeatureKind.X_trough: (5_000.0, 10_015_444.0),
    FeatureKind.R: (3_000.0, 10_012_285.0),
    FeatureKind.G: (50_000.0, 10_011_585.0),
}


def default_windows() -> dict[FeatureKind, WindowConfig]:
    return {
        kind: WindowConfig(kind, span, center, tracking=kind is not FeatureKind.G)
        for kind, (span, center) in _TABLE_WINDOWS.items()
    }


@dataclass(frozen=True, eq=False)
class FrequencySweep:
    kind: FeatureKind
    round_index: int
    timestamp: float
    freq: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        freq = np.asarray(self.freq, dtype=float)
        z = np.asarray(self.z, dtype=complex)
        if freq.ndim != 1 or freq.shape != z.shape:
            raise SpectraError("freq and z must be 1-D arrays of equal length")
        if freq.size != N_POINTS:
            raise SpectraError(f"{self.kind} round {self.round_index}: expected "
                               f"{N_POINTS} samples, got {freq.size}")
        if np.any(np.diff(freq) <= 0):
            raise SpectraError(f"{self.kind} round {self.round_index}: "
                               "frequency grid must be strictly increasing")
        freq.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "z", z)

    @property
    def span(self) -> float:
        return float(self.freq[-1] - self.freq[0])


@dataclass(frozen=True, eq=False)
class ObservableTrace:
    freq: np.ndarray
    value: np.ndarray
    name: str = ""


def derive_observables(sweep: FrequencySweep, which: str) -> ObservableTrace:
    """Compute one electrical observable from a sweep's complex impedance.

    ``which`` is one of R, X, absZ, theta (degrees), G, B.  Admittance-based
    observables raise if any impedance sample is exactly zero.
    """
    z = sweep.z
    if which == "R":
        value = z.real.copy()
    elif which == "X":
        value = z.imag.copy()
    elif which == "absZ":
        value = np.abs(z)
    elif which == "theta":
        value = np.degrees(np.arctan2(z.imag, z.real))
    elif which in ("G", "B"):
        zero = np.flatnonzero(z == 0)
        if zero.size:
            raise SpectraError(f"zero impedance at sample index {int(zero[0])}")
        y = 1.0 / z
        value = y.real if which == "G" else y.imag
    else:
        raise SpectraError(f"unknown observable {which!r}; expected one of {OBSERVABLES}")
    return ObservableTrace(sweep.freq, value, which)


def feature_trace(sweep: FrequencySweep) -> ObservableTrace:
    return derive_observables(sweep, sweep.kind.observable)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise SpectraError(f"normalization std must be positive, got {self.std}")

    def apply(self, freq: np.ndarray) -> np.ndarray:
        return (np.asarray(freq, dtype=float) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.std + self.mean


def reference_stats(first_sweep: FrequencySweep) -> NormStats:
    freq = first_sweep.freq
    std = float(np.std(freq))
    if std == 0:
        raise SpectraError("constant frequency grid")
    return NormStats(float(np.mean(freq)), std)


def normalize_frequency(sweep: FrequencySweep, stats: NormStats) -> np.ndarray:
    return stats.apply(sweep.freq)


@dataclass(frozen=True, eq=False)
class DescriptorMatrix:
    X: np.ndarray
    y: np.ndarray
    timestamps: np.ndarray
    names: tuple[str, ...] = DESCRIPTOR_NAMES
    rounds: np.ndarray | None = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.names))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        t = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if not (X.shape[0] == y.size == t.size):
            raise SpectraError("X, y and timestamps must have the same number of rows")
        if len(set(self.names)) != len(self.names):
            raise SpectraError("descriptor names must be unique")
        rounds = (np.arange(y.size) if self.rounds is None
                  else np.asarray(self.rounds, dtype=int).reshape(-1))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "rounds", rounds)

    @property
    def rows(self) -> int:
        return self.y.size

    def subset(self, mask) -> "DescriptorMatrix":
        idx = np.asarray(mask)
        return replace(self, X=self.X[idx], y=self.y[idx],
                       timestamps=self.timestamps[idx], rounds=self.rounds[idx])

    def __eq__(self, other):
        if not isinstance(other, DescriptorMatrix):
            return NotImplemented
        return (self.names == other.names
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.timestamps, other.timestamps))

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[np.ndarray, float, float, int]]):
        if not rows:
            return cls(np.empty((0, 52)), np.empty(0), np.empty(0), rounds=np.empty(0, int))
        X, y, t, r = zip(*rows)
        return cls(np.vstack(X), np.array(y), np.array(t), rounds=np.array(r))


def assemble_round(fits, target: float, timestamp: float) -> np.ndarray:
    """Flatten one FitRecord per kind into a 52-vector in canonical order."""
    by_kind = {}
    duplicates = []
    for rec in fits:
        if rec.kind in by_kind:
            duplicates.append(rec.kind.value)
        by_kind[rec.kind] = rec
    missing = [k.value for k in KINDS if k not in by_kind]
    if duplicates or missing:
        raise SpectraError(f"round needs one fit per kind; duplicate={duplicates} missing={missing}")
    row = np.concatenate([np.asarray(by_kind[k].values, dtype=float) for k in KINDS])
    if row.size != 52:
        raise SpectraError(f"expected 52 descriptors, got {row.size}")
    return row


# -- CSV IO -------------------------------------------------------------

SWEEP_HEADER = ("round", "kind", "timestamp_s", "freq_hz", "re_z_ohm", "im_z_ohm")


def _fmt(v: float) -> str:
    return repr(float(v))


def save_sweeps(sweeps: Iterable[FrequencySweep], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for s in sweeps:
            ts = _fmt(s.timestamp)
            for f, z in zip(s.freq, s.z):
                w.writerow((s.round_index, s.kind.value, ts, _fmt(f), _fmt(z.real), _fmt(z.imag)))


def load_sweeps(path) -> list[FrequencySweep]:
    """Read a sweep CSV.  Samples are grouped by (round, kind) in file order."""
    groups: dict[tuple[int, FeatureKind], list] = {}
    stamps: dict[tuple[int, FeatureKind], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != SWEEP_HEADER:
            raise SpectraError(f"{path}: line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rnd, kind, ts, f, re, im = row
                key = (int(rnd), FeatureKind(kind))
                sample = (float(f), complex(float(re), float(im)))
                ts = float(ts)
            except ValueError as exc:
                raise SpectraError(f"{path}: line {lineno}: malformed row ({exc})") from None
            bucket = groups.setdefault(key, [])
            if bucket and sample[0] <= bucket[-1][0]:
                raise SpectraError(f"{path}: line {lineno}: frequency column not increasing")
            bucket.append(sample)
            stamps.setdefault(key, ts)
    sweeps = []
    for (rnd, kind), samples in groups.items():
        freq = np.array([s[0] for s in samples])
        z = np.array([s[1] for s in samples])
        sweeps.append(FrequencySweep(kind, rnd, stamps[(rnd, kind)], freq, z))
    return sweeps


def save_descriptors(matrix: DescriptorMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp_s", "target_pct") + tuple(matrix.names))
        for t, y, row in zip(matrix.timestamps, matrix.y, matrix.X):
            w.writerow([_fmt(t), _fmt(y)] + [_fmt(v) for v in row])


def load_descriptors(path) -> DescriptorMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DescriptorMatrix.from_rows([])
        if header[:2] != ["timestamp_s", "target_pct"] or len(header) < 3:
            raise SpectraError(f"{path}: line 1: unexpected header")
        names = tuple(header[2:])
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SpectraError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise SpectraError(f"{path}: line {lineno}: malformed row ({exc})") from None
            rows.append(vals)
    if not rows:
        return DescriptorMatrix(np.empty((0, len(names))), np.empty(0), np.empty(0), names=names)
    arr = np.array(rows)
    return DescriptorMatrix(arr[:, 2:], arr[:, 1], arr[:, 0], names=names)


def group_rounds(sweeps: Iterable[FrequencySweep]) -> dict[int, dict[FeatureKind, FrequencySweep]]:
    rounds: dict[int, dict[FeatureKind, FrequencySweep]] = {}
    for s in sweeps:
        rounds.setdefault(s.round_index, {})[s.kind] = s
    return dict(sorted(rounds.items()))
