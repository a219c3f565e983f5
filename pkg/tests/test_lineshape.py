import math

import numpy as np
import pytest
from helpers import bvd_sweep, constant_sweep
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from qcmfit import bvd
from qcmfit.lineshape import (
    FitError,
    FitRecord,
    GaussianPair,
    LorentzQuad,
    TrackingError,
    derive_bounds,
    fit_gauss2,
    fit_lorentz,
    fit_sweeps,
    gaussian_fwhm,
    levenberg_marquardt,
    load_bounds,
    percentile_bounds,
    qc_filter,
    recenter_window,
    save_bounds,
    sweep_stats,
    track_extremum,
)
from qcmfit.spectra import FeatureKind, ObservableTrace, WindowConfig, feature_trace

X = np.linspace(-math.sqrt(3), math.sqrt(3), 1000)
TRUTH = GaussianPair(2.0, -0.3, 0.5, 1.0, 0.4, 0.3)


def random_pair(r):
    a1 = r.uniform(1, 3)
    return GaussianPair(a1, r.uniform(-0.8, -0.2), r.uniform(0.2, 0.6),
                        a1 * r.uniform(0.3, 0.8), r.uniform(0.2, 0.8), r.uniform(0.2, 0.6))


# -- tracking -------------------------------------------------------------

def test_track_parabola_exact():
    f = np.linspace(1e7 - 500, 1e7 + 500, 1000)
    v = -((f - 1e7 - 37.25) ** 2)
    assert track_extremum(ObservableTrace(f, v)) == pytest.approx(1e7 + 37.25, abs=1e-6)
    assert track_extremum(ObservableTrace(f, -v), mode="min") == pytest.approx(1e7 + 37.25, abs=1e-6)


def test_track_monotone_raises():
    f = np.linspace(0, 1, 100)
    with pytest.raises(TrackingError, match="edge"):
        track_extremum(ObservableTrace(f, f))


def test_track_bad_mode():
    with pytest.raises(ValueError):
        track_extremum(ObservableTrace(np.arange(5.0), np.arange(5.0)), mode="peak")


def test_track_bvd_phase_peak():
    p = bvd.BvdParams()
    w = bvd.simulation_windows(p)[FeatureKind.Z_theta]
    tr = bvd.sweep_trace(p, w, "theta")
    dense = np.linspace(w.center - w.span / 2, w.center + w.span / 2, 100_000)
    oracle = dense[np.argmax(bvd.observable(p, dense, "theta"))]
    assert abs(track_extremum(tr) - oracle) <= 0.5


def test_recenter_window():
    w = WindowConfig(FeatureKind.R, 3000.0, 1e7, True)
    moved = recenter_window(w, 1e7 + 12.5)
    assert moved.center == 1e7 + 12.5 and moved.span == 3000.0
    fixed = WindowConfig(FeatureKind.G, 50_000.0, 1e7, False)
    assert recenter_window(fixed, 1e7 + 12.5) is fixed


# -- Gaussian pair --------------------------------------------------------

def test_gauss2_noiseless_recovery():
    rec = fit_gauss2(X, TRUTH(X))
    np.testing.assert_allclose(rec.values, TRUTH.as_array(), rtol=1e-6, atol=1e-8)
    assert rec.r2 == pytest.approx(1.0, abs=1e-12)
    assert not rec.bounded and rec.active_bounds == ()


def test_gauss2_one_percent_noise():
    errs, r2 = [], []
    for s in range(20):
        r = np.random.default_rng(s)
        p = random_pair(r)
        y = p(X)
        y = y + 0.01 * np.abs(y).max() * r.standard_normal(X.size)
        rec = fit_gauss2(X, y, seed=s)
        errs.append(np.abs(rec.values - p.as_array()) / np.abs(p.as_array()))
        r2.append(rec.r2)
    assert np.median(errs) <= 0.02
    assert min(r2) > 0.99


def test_gauss2_swaps_dominant_second_term():
    truth = GaussianPair(0.5, 0.6, 0.3, 2.0, -0.4, 0.4)
    rec = fit_gauss2(X, truth(X))
    assert abs(rec.params.a1) >= abs(rec.params.a2)
    np.testing.assert_allclose(rec.values, truth.canonical().as_array(), rtol=1e-6, atol=1e-8)


def test_gauss2_deterministic_per_seed():
    y = TRUTH(X) + 0.02 * np.random.default_rng(0).standard_normal(X.size)
    a = fit_gauss2(X, y, seed=(3, "R"))
    b = fit_gauss2(X, y, seed=(3, "R"))
    np.testing.assert_array_equal(a.values, b.values)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=6, max_size=6)
       .filter(lambda v: abs(v[2]) > 0.05 and abs(v[5]) > 0.05))
def test_canonical_idempotent_and_curve_preserving(v):
    p = GaussianPair(*v)
    c = p.canonical()
    assert c.canonical() == c
    assert abs(c.a1) >= abs(c.a2) and c.c1 > 0 and c.c2 > 0
    np.testing.assert_allclose(c(X), p(X), rtol=1e-12, atol=1e-12)


def test_gaussian_fwhm():
    assert gaussian_fwhm(1.0) == pytest.approx(2 * math.sqrt(math.log(2)))
    g = GaussianPair(1.0, 0.0, 0.7, 0.0, 0.0, 1.0)
    half = gaussian_fwhm(0.7) / 2
    assert g(half) == pytest.approx(0.5, rel=1e-12)


def test_flat_input_raises_fit_error():
    with pytest.raises(FitError):
        fit_gauss2(X, np.ones_like(X))
    with pytest.raises(FitError):
        fit_lorentz(X, np.full_like(X, np.nan))


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        fit_gauss2(X[:5], TRUTH(X[:5]))
    with pytest.raises(ValueError):
        fit_gauss2(X[::-1], TRUTH(X))


# -- Lorentzian -----------------------------------------------------------

def test_lorentz_peak_and_width():
    q = LorentzQuad(1.0, 0.0, 1.0, 0.0)
    assert q.peak_value == 1.0
    assert q(np.array([-1.0, 1.0])) == pytest.approx([0.5, 0.5])


def test_lorentz_recovery():
    truth = LorentzQuad(0.02, 0.1, 0.15, 0.3)
    rec = fit_lorentz(X, truth(X))
    np.testing.assert_allclose(rec.values, truth.as_array(), rtol=1e-6, atol=1e-9)


def test_lorentz_on_bvd_conductance():
    s = bvd_sweep(FeatureKind.G)
    stats = sweep_stats([s])[FeatureKind.G]
    x = stats.apply(s.freq)
    y = feature_trace(s).value
    rec = fit_lorentz(x, y)
    assert rec.r2 > 0.99
    assert abs(rec.params.b - x[np.argmax(y)]) <= 0.01 * (x[-1] - x[0])


def test_lorentz_triple_reports_four_params():
    truth = LorentzQuad(0.02, 0.1, 0.15, 0.3)
    y = truth(X) + 0.001 * truth(X - 0.8)
    rec = fit_lorentz(X, y, triple=True)
    assert rec.values.shape == (4,)
    assert rec.r2 > 0.999
    assert rec.params.b == pytest.approx(0.1, abs=0.01)


# -- solver ---------------------------------------------------------------

def test_lm_matches_scipy_on_exponential_decay():
    t = np.linspace(0, 4, 40)
    y = 3.0 * np.exp(-1.3 * t) + 0.2 + 0.01 * np.random.default_rng(1).standard_normal(40)

    def res(p):
        return p[0] * np.exp(-p[1] * t) + p[2] - y

    def fj(p):
        e = np.exp(-p[1] * t)
        return res(p), np.column_stack([e, -p[0] * t * e, np.ones_like(t)])

    ours = levenberg_marquardt(fj, [1.0, 0.5, 0.0])
    ref = least_squares(res, [1.0, 0.5, 0.0], method="lm", xtol=1e-12, ftol=1e-12)
    assert ours.converged
    np.testing.assert_allclose(ours.x, ref.x, rtol=1e-5)


def test_lm_respects_box():
    def fj(p):
        return np.array([p[0] - 5.0]), np.array([[1.0]])

    out = levenberg_marquardt(fj, [0.0], np.array([-1.0]), np.array([2.0]))
    assert out.x[0] == 2.0 and out.converged


# -- bounds and QC --------------------------------------------------------

def test_percentile_bounds_linear_interpolation():
    # index q*(n-1): 1 + 0.02*99 and 1 + 0.98*99
    lo, hi = percentile_bounds(np.arange(1.0, 101.0))
    assert lo == pytest.approx(2.98) and hi == pytest.approx(98.02)
    lo, hi = percentile_bounds(np.column_stack([np.arange(1.0, 101.0), np.zeros(100)]))
    np.testing.assert_allclose(lo, [2.98, 0.0])


def _records(n, kind=FeatureKind.R, seed=0):
    r = np.random.default_rng(seed)
    return [FitRecord(kind, GaussianPair(*r.normal(size=6)), 0.99, round_index=i) for i in range(n)]


def test_derive_bounds_requires_fifty_fits():
    with pytest.raises(ValueError, match="50"):
        derive_bounds(_records(49))
    b = derive_bounds(_records(50))
    lo, hi = b.for_kind(FeatureKind.R)
    assert np.all(lo < hi)
    assert b.for_kind(FeatureKind.X_peak) is None


def test_derive_bounds_widens_constant_parameter():
    recs = [FitRecord(FeatureKind.R, GaussianPair(1.0 + 0.01 * i, 0.0, 0.5, 0.3, 0.2, 0.4), 0.99)
            for i in range(60)]
    b = derive_bounds(recs)
    lo, hi = b.for_kind(FeatureKind.R)
    assert b.degenerate[FeatureKind.R] == (1, 2, 3, 4, 5)
    assert lo[1] < 0.0 < hi[1] and lo[2] < 0.5 < hi[2]


def test_bounded_fit_stays_in_box_and_costs_fit():
    r = np.random.default_rng(4)
    y = TRUTH(X) + 0.01 * r.standard_normal(X.size)
    free = fit_gauss2(X, y)
    lo = TRUTH.as_array() * 0.9 - 0.05
    hi = TRUTH.as_array() * 0.95 - 0.01
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    rec = fit_gauss2(X, y, (lo, hi))
    v = rec.values
    assert rec.bounded and rec.active_bounds
    assert np.all(v >= lo) and np.all(v <= hi)
    assert rec.r2 <= free.r2


def test_qc_filter():
    recs = [FitRecord(FeatureKind.R, TRUTH, r2, round_index=i) for i, r2 in enumerate((0.96, 0.95, 0.5))]
    kept, dropped = qc_filter(recs)
    assert [r.round_index for r in kept] == [0, 1]
    assert [(d.round_index, d.r2) for d in dropped] == [(2, 0.5)]
    kept, dropped = qc_filter(recs, threshold=0.99)
    assert not kept and len(dropped) == 3


def test_bounds_csv_round_trip(tmp_path):
    b = derive_bounds(_records(60) + _records(60, FeatureKind.X_peak, seed=1))
    path = tmp_path / "bounds.csv"
    save_bounds(b, path)
    back = load_bounds(path)
    for kind in (FeatureKind.R, FeatureKind.X_peak):
        for a, c in zip(b.for_kind(kind), back.for_kind(kind)):
            np.testing.assert_array_equal(a, c)


def test_bounds_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "bounds.csv"
    path.write_text("kind,param,lower,upper\nR,a1,0,1\nR,zz,0,1\n")
    with pytest.raises(ValueError, match="line 3"):
        load_bounds(path)
    path.write_text("kind,param,lower,upper\nR,a1,0,1\n")
    with pytest.raises(ValueError, match="incomplete"):
        load_bounds(path)


def test_fit_sweeps_reports_failures():
    good = bvd_sweep(FeatureKind.B_peak)
    flat = constant_sweep(2 + 1j, FeatureKind.R, round_index=0)
    records, failures = fit_sweeps([good, flat])
    assert [r.kind for r in records] == [FeatureKind.B_peak]
    assert records[0].r2 > 0.99
    assert failures[0][:2] == (0, FeatureKind.R)
