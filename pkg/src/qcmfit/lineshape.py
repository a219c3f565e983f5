"""Resonance tracking and constrained line-shape fitting.

Non-conductance features are described by a two-term Gaussian

    g(x) = a1*exp(-((x-b1)/c1)**2) + a2*exp(-((x-b2)/c2)**2)

and the conductance peak by a Lorentzian with constant offset

    L(x) = a / ((x-b)**2 + c**2) + d

on the normalized frequency axis.  Fits are nonlinear least squares with
analytic Jacobians, solved by a Levenberg-Marquardt iteration that projects
onto the box when percentile bounds are supplied, and tried from several
deterministic starting points.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .spectra import (
    KINDS,
    FeatureKind,
    ObservableTrace,
    WindowConfig,
    feature_trace,
    reference_stats,
)


class TrackingError(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


# -- extremum tracking ----------------------------------------------------

def track_extremum(trace: ObservableTrace, mode: str = "max", passes: int = 3,
                   initial_fraction: float = 0.25, min_points: int = 3) -> float:
    """Locate a peak (``mode='max'``) or trough by repeated parabola fits.

    Each pass fits a parabola to the upper (or lower) half of the samples
    lying within the current span around the running estimate, moves the
    estimate to the vertex and halves the span.  The first pass must give a
    valid vertex; later passes that no longer resolve the curvature (noise
    dominating a narrow span) stop the refinement and keep the last vertex.
    """
    if mode not in ("max", "min"):
        raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
    f = np.asarray(trace.freq, dtype=float)
    v = np.asarray(trace.value, dtype=float)
    if mode == "min":
        v = -v
    n = f.size
    i0 = int(np.argmax(v))
    if i0 == 0 or i0 == n - 1:
        raise TrackingError(f"no interior {mode}imum: extremum at window edge "
                            f"({f[i0]:.3f} Hz); recenter the window")
    lo, hi = f[0], f[-1]
    scale = 0.5 * (hi - lo)
    est = f[i0]
    span = initial_fraction * (hi - lo)
    for it in range(passes):
        near = np.flatnonzero(np.abs(f - est) <= 0.5 * span)
        if near.size >= min_points:
            vals = v[near]
            top = vals >= 0.5 * (vals.max() + vals.min())
            near = near[top]
        if near.size < min_points:
            near = np.sort(np.argsort(np.abs(f - est), kind="stable")[:min_points])
        u = (f[near] - est) / scale
        c2, c1, _ = np.polyfit(u, v[near], 2)
        vertex = est - 0.5 * c1 / c2 * scale if c2 < 0 else np.nan
        if it > 0 and not abs(vertex - est) <= 0.5 * span:
            break
        if not c2 < 0:
            raise TrackingError(f"parabola curvature has the wrong sign for a {mode}imum")
        if not lo <= vertex <= hi:
            raise TrackingError(f"parabola vertex {vertex:.3f} Hz outside window [{lo:.3f}, {hi:.3f}]")
        est = vertex
        span *= 0.5
    return float(est)


def recenter_window(window: WindowConfig, tracked: float) -> WindowConfig:
    if not window.tracking:
        return window
    return WindowConfig(window.kind, window.span, float(tracked), True)


# -- models ---------------------------------------------------------------

def gauss2(x, p):
    a1, b1, c1, a2, b2, c2 = p
    return (a1 * np.exp(-(((x - b1) / c1) ** 2))
            + a2 * np.exp(-(((x - b2) / c2) ** 2)))


def _gauss2_fj(x, p):
    """Model values and Jacobian sharing one pair of exponentials."""
    J = np.empty((x.size, 6))
    for k in (0, 3):
        a, b, c = p[k:k + 3]
        u = (x - b) / c
        e = np.exp(-u * u)
        J[:, k] = e
        ae = a * e * 2.0 * u / c
        J[:, k + 1] = ae
        J[:, k + 2] = ae * u
    return p[0] * J[:, 0] + p[3] * J[:, 3], J


def lorentz(x, p):
    a, b, c, d = p
    return a / ((x - b) ** 2 + c * c) + d


def _lorentz_fj(x, p):
    a, b, c, d = p
    inv = 1.0 / ((x - b) ** 2 + c * c)
    J = np.empty((x.size, 4))
    J[:, 0] = inv
    t = a * inv * inv
    J[:, 1] = 2.0 * t * (x - b)
    J[:, 2] = -2.0 * t * c
    J[:, 3] = 1.0
    return a * inv + d, J


def lorentz3(x, p):
    return _lorentz3_fj(x, p)[0]


def _lorentz3_fj(x, p):
    J = np.empty((x.size, 10))
    out = np.full(x.shape, p[9], dtype=float)
    for k in range(0, 9, 3):
        yk, Jk = _lorentz_fj(x, (p[k], p[k + 1], p[k + 2], 0.0))
        out += yk
        J[:, k:k + 3] = Jk[:, :3]
    J[:, 9] = 1.0
    return out, J


def gaussian_fwhm(c: float) -> float:
    """Full width at half maximum of a*exp(-((x-b)/c)**2)."""
    return 2.0 * abs(c) * np.sqrt(np.log(2.0))


# -- records --------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPair:
    a1: float
    b1: float
    c1: float
    a2: float
    b2: float
    c2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a1, self.b1, self.c1, self.a2, self.b2, self.c2])

    def __call__(self, x):
        return gauss2(np.asarray(x, dtype=float), self.as_array())

    def canonical(self) -> "GaussianPair":
        """Relabel so the component with larger |amplitude| comes first."""
        p = self.as_array()
        p[2], p[5] = abs(p[2]), abs(p[5])
        if abs(p[3]) > abs(p[0]):
            p = np.r_[p[3:], p[:3]]
        return GaussianPair(*map(float, p))


@dataclass(frozen=True)
class LorentzQuad:
    a: float
    b: float
    c: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def __call__(self, x):
        return lorentz(np.asarray(x, dtype=float), self.as_array())

    @property
    def peak_value(self) -> float:
        return self.a / self.c ** 2 + self.d


@dataclass(frozen=True)
class FitBounds:
    """Per-kind lower/upper parameter bounds in descriptor order."""
    lower: dict
    upper: dict
    degenerate: dict = field(default_factory=dict)

    def __post_init__(self):
        for kind in self.lower:
            lo = np.asarray(self.lower[kind], float)
            hi = np.asarray(self.upper[kind], float)
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise ValueError(f"{FeatureKind(kind).value}: bounds need lower < upper elementwise")

    def for_kind(self, kind: FeatureKind):
        kind = FeatureKind(kind)
        if kind not in self.lower:
            return None
        return np.asarray(self.lower[kind], float), np.asarray(self.upper[kind], float)

    def rows(self):
        for kind in KINDS:
            if kind in self.lower:
                for name, lo, hi in zip(kind.suffixes, self.lower[kind], self.upper[kind]):
                    yield kind.value, name, float(lo), float(hi)


@dataclass(frozen=True)
class FitRecord:
    kind: FeatureKind
    params: GaussianPair | LorentzQuad
    r2: float
    bounded: bool = False
    active_bounds: tuple[int, ...] = ()
    round_index: int = -1

    @property
    def values(self) -> np.ndarray:
        return self.params.as_array()


def r_squared(y, yhat) -> float:
    y = np.asarray(y, float)
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


# -- fitting --------------------------------------------------------------

def _check_xy(x, y, n_min=12):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < n_min:
        raise ValueError(f"need at least {n_min} points, got {x.size}")
    if np.any(np.diff(x) < 0):
        raise ValueError("x must be sorted")
    if not np.all(np.isfinite(y)) or np.ptp(y) == 0:
        raise FitError("degenerate (flat or non-finite) input; amplitude is not identifiable")
    return x, y


def _start_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    digest = hashlib.sha256(repr(seed).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _half_width(x, y, i0, base):
    """Distance from x[i0] to the half-height crossing, averaged over flanks."""
    half = base + 0.5 * (y[i0] - base)
    sign = np.sign(y[i0] - base) or 1.0
    widths = []
    j = i0
    while j > 0 and sign * (y[j] - half) > 0:
        j -= 1
    if j != i0:
        widths.append(x[i0] - x[j])
    j = i0
    while j < x.size - 1 and sign * (y[j] - half) > 0:
        j += 1
    if j != i0:
        widths.append(x[j] - x[i0])
    dx = x[-1] - x[0]
    if not widths:
        return dx / x.size
    return max(float(np.mean(widths)), dx / x.size)


def _gauss_starts(x, y, rng):
    dx = x[-1] - x[0]
    edge = max(2, x.size // 20)
    base = 0.5 * (np.median(y[:edge]) + np.median(y[-edge:]))
    dev = y - base
    i0 = int(np.argmax(np.abs(dev)))
    hw = _half_width(x, y, i0, base)
    c0 = hw / np.sqrt(np.log(2.0))
    starts = []
    # broad background carrying the baseline plus a narrow feature component
    if abs(base) > 0:
        starts.append([base, x.mean(), 2.0 * dx, dev[i0], x[i0], c0])
    # moment-based single hump split into left/right wings
    w = np.abs(dev)
    if w.sum() > 0:
        mu = float(np.sum(w * x) / w.sum())
        sd = float(np.sqrt(np.sum(w * (x - mu) ** 2) / w.sum()))
        starts.append([y[i0], mu - 0.25 * sd, max(sd, c0), 0.5 * y[i0], mu + 0.25 * sd, max(sd, c0)])
    # grid-peak based: both components on the extremum, wide and narrow
    starts.append([0.7 * y[i0], x[i0], c0, 0.3 * y[i0], x[i0], 4.0 * c0])
    # dispersive shapes: opposite-sign lobes on the grid maximum and minimum
    imax, imin = int(np.argmax(dev)), int(np.argmin(dev))
    if imax != imin and dev[imax] > 0 > dev[imin]:
        cmax = _half_width(x, y, imax, base) / np.sqrt(np.log(2.0))
        cmin = _half_width(x, y, imin, base) / np.sqrt(np.log(2.0))
        starts.append([dev[imax], x[imax], cmax, dev[imin], x[imin], cmin])
    starts.append(_background_start(x, y, x[i0], c0))
    return [np.asarray(s, dtype=float) for s in starts]


def _background_start(x, y, b2, c2):
    """Feature component on the extremum plus a broad background component.

    Centers and widths come from a coarse grid; for each grid point the two
    amplitudes are the linear least-squares solution, and the best grid
    point is returned.  Curved or tilted baselines are reached this way
    without a long Levenberg-Marquardt walk along the background valley.
    """
    dx = x[-1] - x[0]
    best, best_cost = None, np.inf
    for width in (0.5 * c2, c2, 2.0 * c2):
        feature = np.exp(-(((x - b2) / width) ** 2))
        for b1 in x.mean() + dx * np.array([-30.0, -10.0, -3.0, 0.0, 3.0, 10.0, 30.0]):
            for c1 in dx * np.array([1.0, 3.0, 10.0, 30.0, 100.0]):
                A = np.column_stack([np.exp(-(((x - b1) / c1) ** 2)), feature])
                amp, *_ = np.linalg.lstsq(A, y, rcond=None)
                r = y - A @ amp
                cost = float(r @ r)
                if cost < best_cost:
                    best, best_cost = [amp[0], b1, c1, amp[1], b2, width], cost
    return best


def _lorentz_starts(x, y, rng):
    edge = max(2, x.size // 20)
    base = 0.5 * (np.median(y[:edge]) + np.median(y[-edge:]))
    dev = y - base
    i0 = int(np.argmax(np.abs(dev)))
    hw = _half_width(x, y, i0, base)
    starts = [
        [dev[i0] * hw * hw, x[i0], hw, base],
        [dev[i0] * (2 * hw) ** 2, x[i0], 2 * hw, base],
    ]
    mu = float(np.sum(np.abs(dev) * x) / np.abs(dev).sum())
    starts.append([dev[i0] * hw * hw, mu, hw, float(np.min(y) if dev[i0] > 0 else np.max(y))])
    return [np.asarray(s, dtype=float) for s in starts]


@dataclass
class LmResult:
    x: np.ndarray
    cost: float
    converged: bool
    iterations: int


def levenberg_marquardt(fun_jac, p0, lower=None, upper=None, max_iter=200,
                        ftol=1e-8, xtol=1e-8, gtol=1e-10) -> LmResult:
    """Damped Gauss-Newton with Marquardt scaling and projection onto a box.

    ``fun_jac(p)`` returns the residual vector and its Jacobian.  Variables
    sitting on a bound whose gradient points outward are frozen for the
    step.  Convergence is declared when an accepted step improves the cost by
    less than ``ftol`` relatively, moves the parameters by less than ``xtol``
    relatively, or the projected gradient vanishes.
    """
    p = np.asarray(p0, dtype=float).copy()
    bounded = lower is not None
    if bounded:
        p = np.clip(p, lower, upper)
    r, J = fun_jac(p)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        return LmResult(p, np.inf, False, 0)
    mu = None
    nu = 2.0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        A = J.T @ J
        free = np.ones(p.size, dtype=bool)
        if bounded:
            free &= ~((p <= lower) & (g > 0)) & ~((p >= upper) & (g < 0))
        if np.max(np.abs(g[free]), initial=0.0) <= gtol * max(cost, 1e-300) ** 0.5:
            return LmResult(p, cost, True, it)
        d = np.maximum(np.diag(A), 1e-300)
        if mu is None:
            mu = 1e-3 * float(d.max())
        while True:
            step = np.zeros_like(p)
            try:
                step[free] = np.linalg.solve(A[np.ix_(free, free)] + mu * np.diag(d[free]), -g[free])
            except np.linalg.LinAlgError:
                pass
            p_new = p + step
            if bounded:
                p_new = np.clip(p_new, lower, upper)
            dp = p_new - p
            r_new, J_new = fun_jac(p_new)
            cost_new = 0.5 * float(r_new @ r_new)
            predicted = -(g @ dp + 0.5 * dp @ A @ dp)
            rho = (cost - cost_new) / predicted if predicted > 0 and np.isfinite(cost_new) else -1.0
            if rho > 0:
                break
            mu *= nu
            nu *= 2.0
            if mu > 1e30 * float(d.max()):
                # no descent direction left: stationary to working precision
                return LmResult(p, cost, True, it)
        small_f = (cost - cost_new) <= ftol * cost
        small_x = np.linalg.norm(dp) <= xtol * (np.linalg.norm(p) + xtol)
        p, r, J, cost = p_new, r_new, J_new, cost_new
        mu *= max(1.0 / 3.0, 1.0 - (2.0 * min(rho, 1.0) - 1.0) ** 3)
        nu = 2.0
        if small_f or small_x:
            return LmResult(p, cost, True, it)
    return LmResult(p, cost, False, max_iter)


def _domain_box(x, n_params):
    """Generous box keeping unbounded fits away from numerically degenerate
    solutions: centers at most one window width outside the window, widths
    between half a grid step and a hundred window widths.  Amplitudes and offsets
    stay free.
    """
    dx = float(x[-1] - x[0])
    step = dx / (x.size - 1)
    lo = np.full(n_params, -np.inf)
    hi = np.full(n_params, np.inf)
    n_terms = n_params // 3  # the Lorentzian forms carry one trailing offset
    for k in range(0, 3 * n_terms, 3):
        lo[k + 1], hi[k + 1] = x[0] - dx, x[-1] + dx
        lo[k + 2], hi[k + 2] = 0.5 * step, 100.0 * dx
    return lo, hi


def _solve(model_fj, x, y, starts, bounds, rng, max_iter, n_perturbed=1):
    """Run LM from each start plus perturbed copies of the best solution.

    Amplitudes are fitted against ``y / max|y|`` so that every problem is
    O(1) regardless of the observable's units.
    """
    scale = float(np.max(np.abs(y)))
    ys = y / scale
    amp_idx = _amplitude_index(starts[0].size)

    def to_scaled(p):
        q = np.array(p, dtype=float)
        q[amp_idx] /= scale
        return q

    def from_scaled(q):
        p = np.array(q, dtype=float)
        p[amp_idx] *= scale
        return p

    if bounds is None:
        bounds = _domain_box(x, starts[0].size)
    lo, hi = to_scaled(bounds[0]), to_scaled(bounds[1])

    def fun_jac(q):
        with np.errstate(all="ignore"):
            yhat, J = model_fj(x, q)
        return yhat - ys, np.nan_to_num(J, nan=0.0, posinf=0.0, neginf=0.0)

    best = None
    converged = False

    def attempt(q0):
        nonlocal best, converged
        res = levenberg_marquardt(fun_jac, q0, lo, hi, max_iter=max_iter)
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
            return
        converged |= res.converged
        if best is None or res.cost < best.cost:
            best = res

    for p0 in starts:
        attempt(np.clip(to_scaled(p0), lo, hi))
    for _ in range(n_perturbed):
        if best is None:
            break
        attempt(best.x * (1.0 + 0.05 * rng.standard_normal(best.x.size)))
    if best is None or not converged:
        resid_norm = None if best is None else float(np.sqrt(2 * best.cost)) * scale
        raise FitError(f"Levenberg-Marquardt did not converge within {max_iter} iterations",
                       best_residual=resid_norm)
    return from_scaled(best.x), best


def _initial_starts(heuristic, x, y, rng, bounds, init):
    """Warm start alone, or heuristics when there is none or it violates the
    bounds; bounded fits also start from the middle of the box."""
    if init is None:
        starts = heuristic(x, y, rng)
    else:
        init = np.asarray(init, float)
        starts = [init]
        if bounds is not None and (np.any(init < bounds[0]) or np.any(init > bounds[1])):
            starts += heuristic(x, y, rng)
    if bounds is not None:
        starts.append(0.5 * (bounds[0] + bounds[1]))
    return starts


def _amplitude_index(n_params):
    if n_params == 6:
        return [0, 3]
    if n_params == 4:
        return [0, 3]
    return [0, 3, 6, 9]


def _active(p, bounds, rtol=1e-7):
    if bounds is None:
        return ()
    lo, hi = bounds
    tol = rtol * np.maximum(hi - lo, 1e-300)
    return tuple(int(i) for i in np.flatnonzero((p <= lo + tol) | (p >= hi - tol)))


def fit_gauss2(x, y, bounds=None, *, kind: FeatureKind | str = FeatureKind.B_peak,
               seed=0, max_iter: int = 200, round_index: int = -1,
               init=None) -> FitRecord:
    """Least-squares two-term Gaussian fit on a normalized frequency axis.

    ``bounds`` is an optional ``(lower, upper)`` pair of 6-vectors in
    descriptor order.  Unbounded fits are canonically ordered so that
    ``|a1| >= |a2|``; bounded fits are only relabelled when the swapped
    parameters still satisfy the bounds.  ``init`` replaces the heuristic
    starts (used to warm-start bounded refits from the unbounded optimum).
    """
    x, y = _check_xy(x, y)
    rng = np.random.default_rng(_start_seed(seed))
    if bounds is not None:
        bounds = (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    starts = _initial_starts(_gauss_starts, x, y, rng, bounds, init)
    p, _ = _solve(_gauss2_fj, x, y, starts, bounds, rng, max_iter)
    pair = GaussianPair(*map(float, p))
    if bounds is None:
        pair = pair.canonical()
    else:
        swapped = GaussianPair(*map(float, np.r_[p[3:], p[:3]]))
        sp = swapped.as_array()
        if (abs(p[3]) > abs(p[0]) and np.all(sp >= bounds[0]) and np.all(sp <= bounds[1])):
            pair = swapped
    yhat = pair(x)
    return FitRecord(FeatureKind(kind), pair, r_squared(y, yhat), bounds is not None,
                     _active(pair.as_array(), bounds), round_index)


def fit_lorentz(x, y, bounds=None, *, kind: FeatureKind | str = FeatureKind.G,
                triple: bool = False, seed=0, max_iter: int = 200,
                round_index: int = -1, init=None) -> FitRecord:
    """Lorentzian-plus-offset fit.  ``triple=True`` fits three Lorentzians with
    a shared offset and reports the dominant term's (a, b, c) with d.
    """
    x, y = _check_xy(x, y)
    rng = np.random.default_rng(_start_seed(seed))
    if bounds is not None:
        bounds = (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    starts = _initial_starts(_lorentz_starts, x, y, rng, bounds, init)
    p, _ = _solve(_lorentz_fj, x, y, starts, bounds, rng, max_iter)
    p[2] = abs(p[2])
    if triple:
        a, b, c, d = p
        p3_starts = [np.array([a, b, c, 0.1 * a, b - 3 * c, 2 * c, 0.1 * a, b + 3 * c, 2 * c, d])]
        lo3 = hi3 = None
        b3 = None
        if bounds is not None:
            lo, hi = bounds
            lo3 = np.r_[np.tile(lo[:3], 3), lo[3]]
            hi3 = np.r_[np.tile(hi[:3], 3), hi[3]]
            b3 = (lo3, hi3)
        try:
            p3, _ = _solve(_lorentz3_fj, x, y, p3_starts, b3, rng, max_iter * 2)
        except FitError:
            p3 = None
        if p3 is not None:
            yhat3 = lorentz3(x, p3)
            heights = [abs(p3[k] / p3[k + 2] ** 2) for k in (0, 3, 6)]
            k = 3 * int(np.argmax(heights))
            quad = LorentzQuad(float(p3[k]), float(p3[k + 1]), float(abs(p3[k + 2])), float(p3[9]))
            return FitRecord(FeatureKind(kind), quad, r_squared(y, yhat3), bounds is not None,
                             _active(quad.as_array(), bounds), round_index)
    quad = LorentzQuad(*map(float, p))
    return FitRecord(FeatureKind(kind), quad, r_squared(y, quad(x)), bounds is not None,
                     _active(quad.as_array(), bounds), round_index)


def fit_feature(kind: FeatureKind, x, y, bounds: FitBounds | None = None, *,
                round_index: int = -1, triple: bool = False, max_iter: int = 200,
                init=None) -> FitRecord:
    """Dispatch to the model used for ``kind``; start seeds derive from (round, kind)."""
    kind = FeatureKind(kind)
    b = bounds.for_kind(kind) if bounds is not None else None
    seed = (round_index, kind.value)
    if kind is FeatureKind.G:
        return fit_lorentz(x, y, b, kind=kind, triple=triple, seed=seed,
                           max_iter=max_iter, round_index=round_index, init=init)
    return fit_gauss2(x, y, b, kind=kind, seed=seed, max_iter=max_iter,
                      round_index=round_index, init=init)


# -- bounds and quality control ------------------------------------------

MIN_FITS_FOR_BOUNDS = 50


def percentile_bounds(values, q_low=2.0, q_high=98.0):
    """Linear-interpolation percentiles (index = q*(n-1)) per column."""
    v = np.asarray(values, dtype=float)
    return (np.percentile(v, q_low, axis=0, method="linear"),
            np.percentile(v, q_high, axis=0, method="linear"))


def derive_bounds(records: Iterable[FitRecord], q_low=2.0, q_high=98.0,
                  min_fits: int = MIN_FITS_FOR_BOUNDS, widen: float = 1e-9) -> FitBounds:
    """Per-kind [P2, P98] bounds from unbounded fits.

    Degenerate (constant) parameters are widened by ``widen*|value|`` on
    each side (absolute ``widen`` for a zero value) and flagged.
    """
    by_kind: dict[FeatureKind, list] = {}
    for rec in records:
        by_kind.setdefault(rec.kind, []).append(rec.values)
    lower, upper, degenerate = {}, {}, {}
    for kind, vals in by_kind.items():
        if len(vals) < min_fits:
            raise ValueError(f"{kind.value}: need at least {min_fits} unbounded fits "
                             f"to derive bounds, got {len(vals)}")
        lo, hi = percentile_bounds(np.vstack(vals), q_low, q_high)
        flat = hi <= lo
        if np.any(flat):
            pad = np.where(lo[flat] != 0, widen * np.abs(lo[flat]), widen)
            lo[flat] -= pad
            hi[flat] += pad
            degenerate[kind] = tuple(int(i) for i in np.flatnonzero(flat))
        lower[kind], upper[kind] = lo, hi
    return FitBounds(lower, upper, degenerate)


@dataclass(frozen=True)
class QcDrop:
    kind: FeatureKind
    round_index: int
    r2: float


def qc_filter(records: Sequence[FitRecord], threshold: float = 0.95):
    """Split records into those with R^2 >= threshold and a drop report."""
    kept, dropped = [], []
    for rec in records:
        if rec.r2 >= threshold:
            kept.append(rec)
        else:
            dropped.append(QcDrop(rec.kind, rec.round_index, rec.r2))
    return kept, dropped


def save_bounds(bounds: FitBounds, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kind", "param", "lower", "upper"))
        for kind, name, lo, hi in bounds.rows():
            w.writerow((kind, name, repr(lo), repr(hi)))


def load_bounds(path) -> FitBounds:
    import csv
    lower: dict = {}
    upper: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                kind = FeatureKind(row["kind"])
                idx = kind.suffixes.index(row["param"])
                lo, hi = float(row["lower"]), float(row["upper"])
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed bounds row ({exc})") from None
            n = len(kind.suffixes)
            lower.setdefault(kind, np.full(n, np.nan))[idx] = lo
            upper.setdefault(kind, np.full(n, np.nan))[idx] = hi
    for kind in lower:
        if np.any(np.isnan(lower[kind])):
            raise ValueError(f"{path}: incomplete bounds for {kind.value}")
    return FitBounds(lower, upper)


# -- dataset-level fitting -----------------------------------------------

def sweep_stats(sweeps) -> dict:
    """Normalization stats from the first sweep (lowest round) of each kind."""
    first: dict = {}
    for s in sweeps:
        if s.kind not in first or s.round_index < first[s.kind].round_index:
            first[s.kind] = s
    return {kind: reference_stats(s) for kind, s in first.items()}


def fit_sweeps(sweeps, bounds: FitBounds | None = None, *, stats: dict | None = None,
               init: dict | None = None, triple: bool = False, max_iter: int = 200):
    """Fit every sweep on its kind's normalized axis.

    Returns ``(records, failures)``; a sweep whose fit does not converge is
    reported in ``failures`` as ``(round, kind, message)`` rather than
    aborting the batch.  ``init`` maps ``(round, kind)`` to warm-start
    parameters.
    """
    stats = stats or sweep_stats(sweeps)
    records, failures = [], []
    for s in sweeps:
        x = stats[s.kind].apply(s.freq)
        y = feature_trace(s).value
        start = None if init is None else init.get((s.round_index, s.kind))
        try:
            rec = fit_feature(s.kind, x, y, bounds, round_index=s.round_index,
                              triple=triple, max_iter=max_iter, init=start)
        except FitError as exc:
            failures.append((s.round_index, s.kind, str(exc)))
            continue
        records.append(rec)
    return records, failures
