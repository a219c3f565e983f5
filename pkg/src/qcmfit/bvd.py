"""Butterworth-Van Dyke resonator simulation.

The motional branch (R_m, L_m, C_m) sits in parallel with the static
capacitance C_0.  Loading is emulated by moving the phase-angle peak along a
sinusoidal trajectory; at every round the motional inductance and resistance
are co-scaled until the tracked phase peak lands on the scheduled frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .lineshape import TrackingError, recenter_window, track_extremum
from .spectra import (
    KINDS,
    FeatureKind,
    FrequencySweep,
    ObservableTrace,
    WindowConfig,
    default_windows,
    derive_observables,
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BvdParams:
    R_m: float = 5.0
    L_m: float = 9e-3
    C_m: float = 28e-15
    C_0: float = 5e-12

    def __post_init__(self):
        for name in ("R_m", "L_m", "C_m", "C_0"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be strictly positive, got {v}")


@dataclass(frozen=True)
class LoadSchedule:
    sweeps_per_period: int = 100
    peak_to_peak: float = 50.0
    rounds: int = 100
    noise_rel: float = 0.0
    rl_ratio: float = 1.0  # k in dR/R = k * dL/L


@dataclass(frozen=True)
class FlowProfile:
    q1_mean: float = 40.0
    q1_amp: float = 10.0
    q2_mean: float = 10.0
    q2_amp: float = 10.0
    period: float = 3600.0
    stock: float = 5.0
    sample_rate: float = 20.0

    def rates(self, t):
        """Channel flow rates (uL/min); channel 2 lags channel 1 by 180 degrees."""
        ph = np.cos(2.0 * np.pi * np.asarray(t, dtype=float) / self.period)
        return self.q1_mean + self.q1_amp * ph, self.q2_mean - self.q2_amp * ph


def motional_impedance(p: BvdParams, f):
    w = 2.0 * np.pi * np.asarray(f, dtype=float)
    return p.R_m + 1j * w * p.L_m + 1.0 / (1j * w * p.C_m)


def bvd_impedance(p: BvdParams, f):
    w = 2.0 * np.pi * np.asarray(f, dtype=float)
    zm = motional_impedance(p, f)
    zc = 1.0 / (1j * w * p.C_0)
    return zm * zc / (zm + zc)


def bvd_admittance(p: BvdParams, f):
    """Sum of branch admittances; independent of :func:`bvd_impedance`."""
    w = 2.0 * np.pi * np.asarray(f, dtype=float)
    ym = 1.0 / (p.R_m + 1j * (w * p.L_m - 1.0 / (w * p.C_m)))
    return ym + 1j * w * p.C_0


def series_resonance(p: BvdParams) -> float:
    return 1.0 / (2.0 * math.pi * math.sqrt(p.L_m * p.C_m))


def parallel_resonance(p: BvdParams) -> float:
    return series_resonance(p) * math.sqrt(1.0 + p.C_m / p.C_0)


def observable(p: BvdParams, f, which: str) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    z = bvd_impedance(p, f)
    if which == "R":
        return z.real
    if which == "X":
        return z.imag
    if which == "absZ":
        return np.abs(z)
    if which == "theta":
        return np.degrees(np.arctan2(z.imag, z.real))
    y = 1.0 / z
    if which == "G":
        return y.real
    if which == "B":
        return y.imag
    raise ValueError(f"unknown observable {which!r}")


def half_bandwidth(p: BvdParams) -> float:
    """Half width at half maximum of the motional conductance peak, Hz."""
    return p.R_m / (4.0 * math.pi * p.L_m)


def reference_half_bandwidth() -> float:
    """Half-bandwidth implied by the instrument windows (B extrema sit at f_s -/+ Gamma)."""
    w = default_windows()
    return 0.5 * (w[FeatureKind.B_trough].center - w[FeatureKind.B_peak].center)


def window_spans(p: BvdParams, linewidth_multiple: float | None = 2.0) -> dict:
    """Window spans for simulated sweeps.

    With ``linewidth_multiple=None`` the instrument spans are used verbatim.
    Otherwise every span except the phase window is rescaled by the ratio of
    the simulated half-bandwidth to the instrument one, times the multiple,
    so each window covers the same number of linewidths as on the loaded
    crystal.  The phase window is kept: its feature width is set by the
    series/parallel separation, not by the linewidth.
    """
    spans = {k: w.span for k, w in default_windows().items()}
    if linewidth_multiple is None:
        return spans
    ratio = linewidth_multiple * half_bandwidth(p) / reference_half_bandwidth()
    return {k: (s if k is FeatureKind.Z_theta else s * ratio) for k, s in spans.items()}


def simulation_windows(p: BvdParams, spans: dict | None = None,
                       resolution: float = 0.01) -> dict[FeatureKind, WindowConfig]:
    """Acquisition windows centered on the simulated resonance features.

    ``spans`` defaults to :func:`window_spans`; centers come from a dense
    scan of each observable around f_s and f_p.
    """
    spans = spans or window_spans(p)
    fs, fp = series_resonance(p), parallel_resonance(p)
    gamma = half_bandwidth(p)
    out = {}
    for kind in KINDS:
        if kind in (FeatureKind.Zabs_trough, FeatureKind.B_peak, FeatureKind.B_trough, FeatureKind.G):
            lo, hi = fs - 4 * gamma, fs + 4 * gamma
        elif kind is FeatureKind.Z_theta:
            lo, hi = fs + 10 * gamma, fp - 10 * gamma
        else:
            lo, hi = fp - 4 * gamma, fp + 4 * gamma
        f = np.arange(lo, hi, resolution if kind is not FeatureKind.Z_theta else 1.0)
        v = observable(p, f, kind.observable)
        i = int(np.argmax(v) if kind.mode == "max" else np.argmin(v))
        center = float(f[i])
        if kind is FeatureKind.Z_theta:
            ff = np.arange(center - 2.0, center + 2.0, resolution)
            center = float(ff[np.argmax(observable(p, ff, "theta"))])
        out[kind] = WindowConfig(kind, float(spans[kind]), center,
                                 tracking=kind is not FeatureKind.G)
    return out


def sweep_trace(p: BvdParams, window: WindowConfig, which: str) -> ObservableTrace:
    f = window.grid()
    return ObservableTrace(f, observable(p, f, which), which)


def phase_peak_frequency(p: BvdParams, window: WindowConfig) -> float:
    """Tracked phase-angle maximum on the window's 1000-point grid."""
    try:
        return track_extremum(sweep_trace(p, window, "theta"), "max")
    except TrackingError as exc:
        raise SimulationError(f"phase peak not bracketed by window: {exc}") from None


def _loaded(p: BvdParams, u: float, k: float) -> BvdParams:
    return replace(p, L_m=p.L_m * (1.0 + u), R_m=p.R_m * (1.0 + k * u))


def solve_load(p: BvdParams, target: float, window: WindowConfig, k: float = 1.0,
               tol: float = 0.5) -> BvdParams:
    """Co-scale L_m and R_m (dR/R = k dL/L) so the tracked phase peak hits ``target``."""
    def err(u):
        return phase_peak_frequency(_loaded(p, u, k), window) - target

    e0 = err(0.0)
    if abs(e0) <= 1e-6:
        return p
    # peak ~ 1/sqrt(L): a fractional inductance change u moves it by about -u/2
    step = 4.0 * abs(e0) / target
    lo, hi = (-step, 0.0) if e0 < 0 else (0.0, step)
    for _ in range(20):
        if np.sign(err(lo)) != np.sign(err(hi)):
            break
        lo, hi = (lo * 2, hi) if e0 < 0 else (lo, hi * 2)
    else:
        raise SimulationError(f"could not bracket load for target {target:.3f} Hz "
                              f"(residual {e0:.3f} Hz)")
    u = brentq(err, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    out = _loaded(p, u, k)
    resid = err(u)
    if abs(resid) > tol:
        raise SimulationError(f"load solve residual {resid:.3f} Hz exceeds {tol} Hz")
    return out


def concentration_trace(flow: FlowProfile, t) -> np.ndarray:
    """Glycerol concentration (%v/v) at the sensor for the mixed streams."""
    q1, q2 = flow.rates(t)
    return flow.stock * q2 / (q1 + q2)


def phase_offset(schedule: LoadSchedule, round_index) -> np.ndarray:
    """Scheduled phase-peak displacement (Hz, <= 0) for a round."""
    ph = 2.0 * np.pi * np.asarray(round_index, dtype=float) / schedule.sweeps_per_period
    return -0.5 * schedule.peak_to_peak * (1.0 - np.cos(ph))


@dataclass(frozen=True)
class SimulatedRound:
    round_index: int
    timestamp: float
    target: float
    params: BvdParams
    phase_peak: float
    scheduled_peak: float


def generate_dataset(p: BvdParams | None = None, schedule: LoadSchedule | None = None,
                     flow: FlowProfile | None = None, windows=None, seed: int = 0):
    """Synthesize rounds of nine windowed sweeps plus per-round targets.

    Returns ``(sweeps, rounds)`` where ``rounds`` is a list of
    :class:`SimulatedRound`.  Noise is multiplicative on |Z| (phase kept),
    drawn from a generator seeded by ``(seed, round)``.
    """
    p = p or BvdParams()
    schedule = schedule or LoadSchedule()
    flow = flow or FlowProfile()
    windows = dict(windows or simulation_windows(p))
    interval = flow.period / schedule.sweeps_per_period
    dt_sweep = interval / len(KINDS)

    theta_window = windows[FeatureKind.Z_theta]
    peak0 = phase_peak_frequency(p, theta_window)

    n_flow = int(math.ceil(schedule.rounds * interval * flow.sample_rate)) + 2
    t_flow = np.arange(n_flow) / flow.sample_rate
    c_flow = concentration_trace(flow, t_flow)

    sweeps, rounds = [], []
    for r in range(schedule.rounds):
        t0 = r * interval
        scheduled = peak0 + float(phase_offset(schedule, r))
        pr = solve_load(p, scheduled, theta_window, k=schedule.rl_ratio)
        rng = np.random.default_rng([seed, r])
        round_sweeps = {}
        for j, kind in enumerate(KINDS):
            w = windows[kind]
            f = w.grid()
            z = bvd_impedance(pr, f)
            if schedule.noise_rel > 0:
                z = z * (1.0 + schedule.noise_rel * rng.standard_normal(f.size))
            s = FrequencySweep(kind, r, t0 + j * dt_sweep, f, z)
            round_sweeps[kind] = s
            sweeps.append(s)
        peak = track_extremum(derive_observables(round_sweeps[FeatureKind.Z_theta], "theta"), "max")
        target = float(np.interp(t0, t_flow, c_flow))
        rounds.append(SimulatedRound(r, t0, target, pr, peak, scheduled))
        for kind, s in round_sweeps.items():
            w = windows[kind]
            try:
                tracked = track_extremum(derive_observables(s, kind.observable), kind.mode)
            except TrackingError as exc:
                raise SimulationError(f"round {r}: {kind.value} feature left its {w.span:.0f} Hz "
                                      f"window ({exc}); use a larger span") from None
            if abs(tracked - w.center) > 0.5 * w.span:
                raise SimulationError(f"round {r}: {kind.value} drifted {tracked - w.center:.1f} Hz, "
                                      f"beyond its {w.span:.0f} Hz window; use a larger span")
            windows[kind] = recenter_window(w, tracked)
    return sweeps, rounds


def save_targets(rounds, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp_s", "target_pct"))
        for r in rounds:
            w.writerow((repr(float(r.timestamp)), repr(float(r.target))))


def load_targets(path):
    import csv
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return np.empty(0), np.empty(0)
        if [h.strip() for h in header] != ["timestamp_s", "target_pct"]:
            raise ValueError(f"{path}: line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed row ({exc})") from None
    arr = np.array(out).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]
