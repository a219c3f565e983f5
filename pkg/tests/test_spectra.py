import math

import numpy as np
import pytest
from helpers import bvd_sweep, constant_sweep
from hypothesis import given, settings
from hypothesis import strategies as st

from qcmfit import bvd
from qcmfit.lineshape import FitRecord, GaussianPair, LorentzQuad
from qcmfit.spectra import (
    DESCRIPTOR_NAMES,
    KINDS,
    DescriptorMatrix,
    FeatureKind,
    FrequencySweep,
    NormStats,
    SpectraError,
    WindowConfig,
    assemble_round,
    default_windows,
    derive_observables,
    load_descriptors,
    load_sweeps,
    normalize_frequency,
    reference_stats,
    save_descriptors,
    save_sweeps,
)


def test_nine_kinds_each_with_one_window():
    assert len(KINDS) == 9
    w = default_windows()
    assert set(w) == set(KINDS)
    assert all(w[k].kind is k for k in KINDS)


def test_default_windows_match_instrument_table():
    w = default_windows()
    assert (w[FeatureKind.B_peak].span, w[FeatureKind.B_peak].center) == (3000.0, 10_008_449.0)
    assert (w[FeatureKind.G].span, w[FeatureKind.G].center) == (50_000.0, 10_011_585.0)
    assert (w[FeatureKind.Z_theta].span, w[FeatureKind.Z_theta].center) == (5000.0, 10_011_947.0)
    assert [k for k in KINDS if not w[k].tracking] == [FeatureKind.G]


def test_window_span_must_be_positive():
    with pytest.raises(SpectraError):
        WindowConfig(FeatureKind.R, 0.0, 1e7)


def test_window_grid_covers_span():
    g = default_windows()[FeatureKind.R].grid()
    assert g.size == 1000
    assert g[-1] - g[0] == pytest.approx(3000.0)


def test_observables_of_three_plus_four_i():
    s = constant_sweep(3 + 4j)
    assert derive_observables(s, "absZ").value[0] == pytest.approx(5.0)
    assert derive_observables(s, "theta").value[0] == pytest.approx(53.130102354, abs=1e-8)
    assert derive_observables(s, "G").value[0] == pytest.approx(0.12)
    assert derive_observables(s, "B").value[0] == pytest.approx(-0.16)
    assert derive_observables(s, "R").value[0] == 3.0
    assert derive_observables(s, "X").value[0] == 4.0


def test_purely_real_impedance():
    s = constant_sweep(7.5 + 0j)
    for which in ("X", "B", "theta"):
        assert np.all(derive_observables(s, which).value == 0.0)


def test_zero_impedance_sample_is_named():
    f = np.linspace(1e7, 1e7 + 999, 1000)
    z = np.ones(1000, complex)
    z[417] = 0
    s = FrequencySweep(FeatureKind.G, 0, 0.0, f, z)
    with pytest.raises(SpectraError, match="417"):
        derive_observables(s, "G")


def test_unknown_observable():
    with pytest.raises(SpectraError):
        derive_observables(constant_sweep(1 + 1j), "Q")


def test_bvd_sweep_minimum_modulus_near_motional_resistance():
    s = bvd_sweep(FeatureKind.Zabs_trough)
    zmin = derive_observables(s, "absZ").value.min()
    assert zmin == pytest.approx(5.0, rel=0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_admittance_is_inverse_impedance(seed):
    r = np.random.default_rng(seed)
    f = np.sort(r.uniform(1e6, 2e7, 1000))
    f = np.unique(f)
    if f.size < 1000:
        return
    z = r.uniform(0.1, 1e3, 1000) + 1j * r.uniform(-1e3, 1e3, 1000)
    s = FrequencySweep(FeatureKind.B_peak, 0, 0.0, f, z)
    R, X = derive_observables(s, "R").value, derive_observables(s, "X").value
    G, B = derive_observables(s, "G").value, derive_observables(s, "B").value
    y = 1.0 / (R + 1j * X)
    np.testing.assert_allclose(G + 1j * B, y, rtol=1e-12)


def test_sweep_invariants_enforced():
    f = np.linspace(1e7, 1e7 + 999, 1000)
    with pytest.raises(SpectraError):
        FrequencySweep(FeatureKind.R, 0, 0.0, f[:999], np.ones(999))
    g = f.copy()
    g[10] = g[9]
    with pytest.raises(SpectraError):
        FrequencySweep(FeatureKind.R, 0, 0.0, g, np.ones(1000))


def test_sweep_span_within_one_step_of_window():
    s = bvd_sweep(FeatureKind.B_peak)
    w = bvd.simulation_windows(bvd.BvdParams())[FeatureKind.B_peak]
    assert abs(s.span - w.span) <= w.span / 999


def test_reference_stats_population_std():
    f = np.arange(1.0, 1001.0)
    s = FrequencySweep(FeatureKind.R, 0, 0.0, f, np.ones(1000))
    st_ = reference_stats(s)
    assert st_.mean == 500.5
    assert st_.std == pytest.approx(math.sqrt((1000**2 - 1) / 12.0))
    # three-point case of the same convention
    assert np.std([1.0, 2.0, 3.0]) == pytest.approx(math.sqrt(2.0 / 3.0))


def test_self_normalization_and_shift():
    s = bvd_sweep(FeatureKind.R)
    stats = reference_stats(s)
    x = normalize_frequency(s, stats)
    assert x.mean() == pytest.approx(0.0, abs=1e-9)
    assert x.std() == pytest.approx(1.0, rel=1e-12)
    shifted = FrequencySweep(s.kind, 1, 1.0, s.freq + 10.0, s.z)
    assert normalize_frequency(shifted, stats).mean() == pytest.approx(10.0 / stats.std, rel=1e-6)


def test_normalization_is_invertible():
    stats = NormStats(1e7, 250.0)
    f = np.linspace(1e7 - 500, 1e7 + 500, 17)
    np.testing.assert_allclose(stats.invert(stats.apply(f)), f, rtol=0, atol=1e-7)


def test_norm_stats_reject_zero_std():
    with pytest.raises(SpectraError):
        NormStats(0.0, 0.0)


def _fits(skip=None, extra=None):
    out = []
    for i, k in enumerate(KINDS):
        if k is skip:
            continue
        if k is FeatureKind.G:
            params = LorentzQuad(1.0, 0.1, 0.2, 0.01)
        else:
            params = GaussianPair(i + 1.0, 0.1 * i, 1.0, 0.5, -0.1, 2.0)
        out.append(FitRecord(k, params, 0.99))
    if extra is not None:
        out.append(extra)
    return out


def test_descriptor_names():
    assert len(DESCRIPTOR_NAMES) == 52 == len(set(DESCRIPTOR_NAMES))
    assert DESCRIPTOR_NAMES[:6] == tuple(f"B_peak.{s}" for s in ("a1", "b1", "c1", "a2", "b2", "c2"))
    assert DESCRIPTOR_NAMES[-4:] == ("G.a", "G.b", "G.c", "G.d")


def test_assemble_round_shape_and_order():
    row = assemble_round(_fits(), 1.2, 36.0)
    assert row.shape == (52,) and np.all(np.isfinite(row))
    assert row[0] == 1.0 and row[6] == 2.0
    np.testing.assert_array_equal(row, assemble_round(list(reversed(_fits())), 1.2, 36.0))


def test_assemble_round_missing_kind():
    with pytest.raises(SpectraError, match="B_peak"):
        assemble_round(_fits(skip=FeatureKind.B_peak), 0.0, 0.0)


def test_assemble_round_duplicate_kind():
    dup = FitRecord(FeatureKind.G, LorentzQuad(1, 0, 1, 0), 0.99)
    with pytest.raises(SpectraError, match="duplicate"):
        assemble_round(_fits(extra=dup), 0.0, 0.0)


def test_sweep_csv_round_trip(tmp_path):
    p = bvd.BvdParams()
    sweeps = [bvd_sweep(k, p, round_index=r, timestamp=4.0 * i + 36 * r)
              for r in range(2) for i, k in enumerate(KINDS)]
    path = tmp_path / "s.csv"
    save_sweeps(sweeps, path)
    back = load_sweeps(path)
    assert len(back) == len(sweeps)
    for a, b in zip(sweeps, back):
        assert (a.kind, a.round_index, a.timestamp) == (b.kind, b.round_index, b.timestamp)
        np.testing.assert_array_equal(a.freq, b.freq)
        np.testing.assert_array_equal(a.z, b.z)


def test_empty_sweep_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert load_sweeps(path) == []


def test_non_monotone_frequency_rejected_with_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("round,kind,timestamp_s,freq_hz,re_z_ohm,im_z_ohm\n"
                    "0,R,0,100,1,0\n0,R,0,99,1,0\n")
    with pytest.raises(SpectraError, match="line 3"):
        load_sweeps(path)


def test_malformed_sweep_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("round,kind,timestamp_s,freq_hz,re_z_ohm,im_z_ohm\n0,R,0,abc,1,0\n")
    with pytest.raises(SpectraError, match="line 2"):
        load_sweeps(path)


def test_descriptor_csv_round_trip(tmp_path):
    r = np.random.default_rng(3)
    m = DescriptorMatrix(r.normal(size=(5, 52)) * 10.0 ** r.integers(-8, 8, (5, 52)),
                         r.uniform(0, 2, 5), np.arange(5) * 36.0)
    path = tmp_path / "d.csv"
    save_descriptors(m, path)
    assert load_descriptors(path) == m


def test_descriptor_matrix_checks():
    with pytest.raises(SpectraError):
        DescriptorMatrix(np.zeros((3, 52)), np.zeros(2), np.zeros(3))
    with pytest.raises(SpectraError):
        DescriptorMatrix(np.zeros((1, 2)), np.zeros(1), np.zeros(1), names=("a", "a"))
