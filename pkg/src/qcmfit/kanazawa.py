"""Half-bandwidth baseline: conductance Gamma -> viscosity -> concentration.

For a Newtonian liquid the Kanazawa-Gordon relation gives the magnitude of
the frequency shift, which equals the half-bandwidth Gamma of the
conductance resonance:

    Gamma = f0**1.5 * sqrt(rho_l * eta / (pi * rho_q * mu_q))

so eta = Gamma**2 * pi * rho_q * mu_q / (f0**3 * rho_l).  Viscosity is
mapped to glycerol concentration through a monotone (PCHIP) inversion of a
calibration table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.interpolate import PchipInterpolator

from .lineshape import FitError, TrackingError, fit_lorentz, track_extremum
from .spectra import FeatureKind, ObservableTrace, derive_observables


class GammaError(ValueError):
    pass


@dataclass(frozen=True)
class CrystalConstants:
    f0: float = 1e7
    rho_q: float = 2650.0
    mu_q: float = 2.947e10

    def __post_init__(self):
        if min(self.f0, self.rho_q, self.mu_q) <= 0:
            raise ValueError("crystal constants must be positive")


@dataclass(frozen=True)
class GammaReading:
    f_r: float
    gamma: float
    baseline: float


def _peak_height(g, i):
    """Height of the 3-point parabola through the grid maximum."""
    if 0 < i < g.size - 1:
        y0, y1, y2 = g[i - 1], g[i], g[i + 1]
        den = y0 - 2.0 * y1 + y2
        if den < 0:
            return float(y1 - (y2 - y0) ** 2 / (8.0 * den))
    return float(g[i])


def _crossing(f, g, j, level):
    """Frequency where g passes ``level`` between samples j and j+1.

    Cubic inverse interpolation through the four surrounding samples when g
    is strictly monotone over them, linear otherwise.
    """
    lin = f[j] + (level - g[j]) * (f[j + 1] - f[j]) / (g[j + 1] - g[j])
    if j < 1 or j + 2 >= f.size:
        return lin
    gg, ff = g[j - 1:j + 3], f[j - 1:j + 3]
    d = np.diff(gg)
    if not (np.all(d > 0) or np.all(d < 0)):
        return lin
    # Lagrange form in g, centered for conditioning
    t = (gg - level)
    out = 0.0
    for a in range(4):
        w = 1.0
        for b in range(4):
            if b != a:
                w *= (0.0 - t[b]) / (t[a] - t[b])
        out += w * ff[a]
    return float(out) if f[j] <= out <= f[j + 1] else lin


def _lorentz_level(f, g, min_r2):
    """Baseline and peak height from a Lorentzian-plus-offset fit, or None
    when the trace is not Lorentzian enough to trust them."""
    x = (f - f.mean()) / f.std()
    try:
        rec = fit_lorentz(x, g)
    except (FitError, ValueError):
        return None
    if not rec.r2 >= min_r2 or not rec.params.a > 0:
        return None
    if rec.params.c * f.std() > 0.25 * (f[-1] - f[0]):
        return None  # flanks not inside the window; offset and width are confounded
    return rec.params.d, rec.params.peak_value


def extract_gamma(trace: ObservableTrace, edge_fraction: float = 0.05,
                  min_r2: float = 0.999) -> GammaReading:
    """Peak position and half width at half height of a conductance trace.

    The baseline and peak height come from a Lorentzian-plus-offset fit when
    it describes the trace (R^2 >= ``min_r2``); the slowly decaying tails
    would otherwise bias an edge-sample baseline.  Failing that, the baseline
    is the mean of the outer ``edge_fraction`` of samples on each side and
    the height a 3-point parabola through the maximum.  The peak position
    comes from the parabola tracker and the half-height crossings are
    linearly interpolated on each flank.
    """
    f = np.asarray(trace.freq, dtype=float)
    g = np.asarray(trace.value, dtype=float)
    try:
        f_r = track_extremum(trace, "max")
    except TrackingError as exc:
        raise GammaError(f"conductance peak not found: {exc}") from None
    i = int(np.argmax(g))
    level = _lorentz_level(f, g, min_r2)
    if level is None:
        n_edge = max(1, int(round(edge_fraction * f.size)))
        baseline = float(np.mean(np.r_[g[:n_edge], g[-n_edge:]]))
        height = _peak_height(g, i)
    else:
        baseline, height = level
    half = baseline + 0.5 * (height - baseline)
    left = np.flatnonzero(g[:i] < half)
    right = np.flatnonzero(g[i:] < half)
    if left.size == 0 or right.size == 0:
        side = "low" if left.size == 0 else "high"
        raise GammaError(f"half height not crossed on the {side}-frequency flank; widen the window")
    j = left[-1]
    k = i + right[0]
    f_lo = _crossing(f, g, j, half)
    f_hi = _crossing(f, g, k - 1, half)
    return GammaReading(float(f_r), 0.5 * float(f_hi - f_lo), baseline)


def gamma_from_viscosity(eta: float, rho_l: float, c: CrystalConstants | None = None) -> float:
    c = c or CrystalConstants()
    if eta < 0 or rho_l <= 0:
        raise ValueError("need eta >= 0 and rho_l > 0")
    return c.f0 ** 1.5 * math.sqrt(rho_l * eta / (math.pi * c.rho_q * c.mu_q))


def viscosity_from_gamma(gamma: float | GammaReading, c: CrystalConstants | None = None,
                         rho_l: float = 997.0) -> float:
    """Invert the Kanazawa-Gordon magnitude for eta (Pa s)."""
    c = c or CrystalConstants()
    g = gamma.gamma if isinstance(gamma, GammaReading) else float(gamma)
    if not (g > 0 and rho_l > 0) or not math.isfinite(g):
        raise ValueError(f"non-physical input: gamma={g}, rho_l={rho_l}")
    return g * g * math.pi * c.rho_q * c.mu_q / (c.f0 ** 3 * rho_l)


class ViscosityCalibration:
    """Concentration/viscosity/density knots with a monotone inverse."""

    def __init__(self, pct, eta, rho):
        pct = np.asarray(pct, dtype=float)
        eta = np.asarray(eta, dtype=float)
        rho = np.asarray(rho, dtype=float)
        if not (pct.size == eta.size == rho.size) or pct.size < 2:
            raise ValueError("calibration needs at least two aligned knots")
        if np.any(np.diff(pct) <= 0) or np.any(np.diff(eta) <= 0):
            raise ValueError("calibration must be strictly increasing in concentration and viscosity")
        self.pct, self.eta, self.rho = pct, eta, rho
        self._inverse = PchipInterpolator(eta, pct)
        self._density = PchipInterpolator(pct, rho)

    @classmethod
    def from_csv(cls, path):
        pct, eta, rho = [], [], []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    pct.append(float(row["pct"]))
                    eta.append(float(row["eta_pa_s"]))
                    rho.append(float(row["rho_kg_m3"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}: line {lineno}: malformed calibration row ({exc})") from None
        return cls(pct, eta, rho)

    @classmethod
    def default(cls):
        """Glycerol-water at 25 C (Cheng 2008 viscosity correlation)."""
        ref = resources.files("qcmfit") / "data" / "glycerol_water_25C.csv"
        with resources.as_file(ref) as path:
            return cls.from_csv(path)

    def concentration(self, eta: float) -> tuple[float, bool]:
        """Concentration for ``eta``; the flag is set when eta was clamped."""
        clamped = not self.eta[0] <= eta <= self.eta[-1]
        e = min(max(eta, self.eta[0]), self.eta[-1])
        return float(self._inverse(e)), clamped

    def density(self, pct: float) -> float:
        p = min(max(pct, self.pct[0]), self.pct[-1])
        return float(self._density(p))


def concentration_from_viscosity(eta: float, cal: ViscosityCalibration) -> float:
    return cal.concentration(eta)[0]


@dataclass(frozen=True)
class KanazawaPoint:
    round_index: int
    timestamp: float
    gamma: float
    eta: float
    pct: float
    clamped: bool


def predict_one(reading: GammaReading, c: CrystalConstants, cal: ViscosityCalibration,
                tol: float = 1e-12, max_iter: int = 50):
    """Viscosity and concentration for one reading.

    Density depends on concentration, so the inversion is iterated from the
    lowest-concentration density until the concentration settles.
    """
    pct = cal.pct[0]
    for _ in range(max_iter):
        eta = viscosity_from_gamma(reading, c, cal.density(pct))
        new, clamped = cal.concentration(eta)
        done = abs(new - pct) <= tol
        pct = new
        if done:
            break
    return eta, pct, clamped


def kanazawa_predict(g_sweeps, c: CrystalConstants | None = None,
                     cal: ViscosityCalibration | None = None):
    """Concentration series from per-round conductance sweeps.

    Accepts FrequencySweeps (kind G; other kinds are ignored) or
    ObservableTraces paired as ``(round, timestamp, trace)``.  Returns
    ``(points, skipped)`` where ``skipped`` lists ``(round, reason)``.
    """
    c = c or CrystalConstants()
    cal = cal or ViscosityCalibration.default()
    points, skipped = [], []
    for item in g_sweeps:
        if isinstance(item, tuple):
            r, t, trace = item
        else:
            if item.kind is not FeatureKind.G:
                continue
            r, t, trace = item.round_index, item.timestamp, derive_observables(item, "G")
        try:
            reading = extract_gamma(trace)
            eta, pct, clamped = predict_one(reading, c, cal)
        except (GammaError, ValueError) as exc:
            skipped.append((r, str(exc)))
            continue
        points.append(KanazawaPoint(int(r), float(t), reading.gamma, eta, pct, clamped))
    return points, skipped


def save_predictions(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "timestamp_s", "gamma_hz", "eta", "pred_pct"))
        for p in points:
            w.writerow((p.round_index, repr(p.timestamp), repr(p.gamma), repr(p.eta), repr(p.pct)))


def load_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["timestamp_s"]) for r in rows]),
            np.array([float(r["pred_pct"]) for r in rows]))
