from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseless import geometry as geo
from phaseless.eikonal import solve_tau
from phaseless.forward import (
    A0,
    ForwardError,
    KSweep,
    PhaselessDataset,
    amplitude_helmholtz,
    chord_meets_support,
    field_schrodinger,
    helmholtz_intensity,
    km_members,
    receiver_lattice,
    schrodinger_intensity,
    source_points,
    synth_dataset,
    v0,
    vsc_leading,
)
from phaseless.grid import VoxelField
from phaseless.phantom import BumpSum, Segment, line_integral_oracle, single_bump

G = geo.BallGeometry(1.0, 2.0)
Q = single_bump([0.2, 0.0, 0.0], 0.5, 1.0)
ELL_S = geo.min_ell_schrodinger(G) * 1.05


def test_sweep_validation():
    with pytest.raises(ForwardError):
        KSweep(0.0, 1.0, 4)
    with pytest.raises(ForwardError):
        KSweep(2.0, 1.0, 4)
    with pytest.raises(ForwardError):
        KSweep(1.0, 2.0, 1)
    with pytest.raises(ForwardError):
        KSweep(1.0, 2.0, 4, "log")
    s = KSweep(100.0, 140.0, 5)
    np.testing.assert_allclose(s.ks(), [100, 110, 120, 130, 140])
    assert s.step == pytest.approx(10.0)


def test_v0_examples():
    x, y = np.array([1.0, 0, 0]), np.zeros(3)
    assert abs(v0(x, y, 7.3)) == pytest.approx(1 / (4 * math.pi), rel=1e-15)
    assert abs(v0(2 * x, y, 7.3)) == pytest.approx(0.5 / (4 * math.pi), rel=1e-15)
    assert v0(x, y, math.pi) == pytest.approx(-A0(x, y), abs=1e-15)
    with pytest.raises(ForwardError):
        v0(x, x, 1.0)


def test_vsc_leading_examples():
    x, y = np.array([-1.5, 0, 0]), np.array([1.5, 0, 0])
    assert vsc_leading(BumpSum(), x, y, 100.0) == 0
    a, b = vsc_leading(Q, x, y, 100.0), vsc_leading(Q, x, y, 200.0)
    assert abs(b) == pytest.approx(0.5 * abs(a), rel=1e-12)
    p = single_bump([0, 0, 0], 0.5, 1.0)
    I = line_integral_oracle(p, Segment(x, y))
    assert abs(vsc_leading(p, x, y, 300.0)) == pytest.approx(I / (8 * math.pi * 3.0 * 300.0), rel=1e-12)
    with pytest.raises(ForwardError):
        vsc_leading(Q, x, y, 0.0)


def test_field_schrodinger_expansion():
    x, y = np.array([1.9, 0.3, -0.2]), np.array([-1.8, 0.2, 0.5])
    z = np.array([0.5, 6.0, 2.0])
    k = 417.3
    assert field_schrodinger(BumpSum(), x, y, z, k) == v0(x, y, k) + v0(x, z, k)
    u = field_schrodinger(Q, x, y, z, k)
    assert u == pytest.approx(field_schrodinger(Q, x, z, y, k), rel=1e-15)
    # four-term expansion of |v0(x,y) + vsc + v0(x,z)|^2 with vsc(x,z) = 0 (chord to z misses the bump)
    assert line_integral_oracle(Q, Segment(x, z)) == 0.0
    ay, az = A0(x, y), A0(x, z)
    ry, rz = np.linalg.norm(x - y), np.linalg.norm(x - z)
    I = line_integral_oracle(Q, Segment(x, y))
    c = I / (8 * math.pi * ry * k)
    expanded = (ay**2 + az**2 + 2 * ay * az * math.cos(k * (rz - ry)) + c**2
                + 2 * c * az * math.sin(k * (rz - ry)))
    assert abs(u) ** 2 == pytest.approx(expanded, rel=1e-13)
    assert schrodinger_intensity(ry, rz, I, np.array([k]))[0] == pytest.approx(abs(u) ** 2, rel=1e-13)


@given(st.floats(0, 2 * math.pi), st.floats(1.0, 1e4))
def test_intensity_invariant_to_global_phase(theta, k):
    ry, rz, I = 1.3, 7.1, 0.4
    u = (np.exp(1j * k * ry) / (4 * math.pi * ry) + 1j * np.exp(1j * k * ry) * I / (8 * math.pi * ry * k)
         + np.exp(1j * k * rz) / (4 * math.pi * rz))
    f = schrodinger_intensity(ry, rz, I, np.array([k]))[0]
    assert abs(np.exp(1j * theta) * u) ** 2 == pytest.approx(f, rel=1e-12)
    assert abs(np.exp(1j * math.pi / 3) * u) ** 2 == pytest.approx(f, rel=1e-12)
    assert f >= 0


def test_amplitude_helmholtz():
    g = VoxelField.covering(1.25, 1 / 16, 1.0)
    y = np.array([0.013, -0.021, 0.034])
    t = solve_tau(g, y)
    xs = np.array([[0.9, 0.1, 0.0], [0.4, -0.5, 0.6], [-0.8, 0.7, 0.2]])
    a = amplitude_helmholtz(t, xs)
    assert np.all(a > 0)
    np.testing.assert_allclose(a, A0(xs, y), rtol=0.02)
    order = np.argsort(np.linalg.norm(xs - y, axis=1))
    assert np.all(np.diff(a[order]) < 0)


@given(st.floats(0.01, 10.0), st.floats(1e-3, 1e4), st.integers(1, 12))
def test_km_members_properties(delta, k0, count):
    ks = km_members(delta, k0, count)
    assert ks.shape == (count,)
    assert np.all(ks >= k0) and np.all(np.diff(ks) > 0)
    assert (ks[0] - 2 * math.pi / delta) < k0  # first member at or above k0
    np.testing.assert_allclose(np.sin(ks * delta), 1.0, atol=1e-9)


def test_km_members_examples():
    assert km_members(0.5, 100.0, 1)[0] == pytest.approx(33 * math.pi, rel=1e-15)
    assert km_members(math.pi / 2, 1e-12, 1)[0] == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(ForwardError):
        km_members(0.0, 1.0, 2)


def test_chord_meets_support():
    y = np.array([-2.0, 0, 0])
    xs = np.array([[2.0, 0, 0], [2.0, 1.5, 0], [-1.0, 1.9, 0.0]])
    np.testing.assert_array_equal(chord_meets_support(Q, y, xs), [True, False, False])
    zero = single_bump([0, 0, 0], 0.5, 0.0, baseline=1.0)
    assert not chord_meets_support(zero, y, xs).any()


@pytest.fixture(scope="module")
def zero_q_dataset():
    return synth_dataset(G, BumpSum(), "schrodinger", source_points(2.0, 3), ELL_S,
                         KSweep(1000.0, 5000.0, 8, "km"), 60)


def test_synth_zero_potential_is_exact_expansion(zero_q_dataset):
    ds = zero_q_dataset
    ry = np.linalg.norm(ds.x - ds.y_for(), axis=1)[:, None]
    rz = np.linalg.norm(ds.x - ds.z_for(), axis=1)[:, None]
    ay, az = 1 / (4 * math.pi * ry), 1 / (4 * math.pi * rz)
    expected = ay**2 + az**2 + 2 * ay * az * np.cos(ds.k * (rz - ry))
    np.testing.assert_allclose(ds.f, expected, rtol=1e-12, atol=1e-18)


def test_synth_bookkeeping(zero_q_dataset):
    ds = zero_q_dataset
    assert ds.n_records == len(ds.x) == ds.f.shape[0]
    assert np.all(ds.f >= 0)
    zs = ds.z_for()
    assert np.all(np.einsum("ij,ij->i", ds.x, zs - ds.x) > 0)  # every receiver is lit
    delta = np.linalg.norm(ds.x - zs, axis=1) - np.linalg.norm(ds.x - ds.y_for(), axis=1)
    assert np.all(delta > 0)
    for yi, y in enumerate(ds.sources):
        tri = geo.make_triad(G, y, ELL_S)
        lattice = receiver_lattice(tri, G.R, 60)
        expected = sum(int(geo.is_illuminated(lattice, z).sum()) for z in tri.z)
        assert np.sum(ds.y_index == yi) == expected
        for jj in (1, 2, 3):
            per_cap = np.sum((ds.y_index == yi) & (ds.j == jj))
            assert abs(per_cap - 60) <= 6  # density per cap, up to lattice rounding


def test_synth_rejects_small_ell():
    with pytest.raises(ForwardError, match="Theorem 1"):
        synth_dataset(G, Q, "schrodinger", source_points(2.0, 2), 2.0, KSweep(1e3, 5e3, 8, "km"), 20)
    n = single_bump([0.2, 0, 0], 0.5, 0.05, baseline=1.0)
    with pytest.raises(ForwardError, match="Theorem 2"):
        synth_dataset(G, n, "helmholtz", source_points(2.0, 2), 5.5, KSweep(50, 60, 64), 20, n1=1.05)
    with pytest.raises(ForwardError):
        synth_dataset(G, Q, "schrodinger", source_points(2.0, 2), ELL_S, KSweep(1e3, 1.001e3, 8, "km"), 20)


def test_helmholtz_homogeneous_records_are_cosines():
    n = BumpSum((), 1.0)
    ell = geo.min_ell_helmholtz(G, 1.0) * 1.05
    sweep = KSweep(50.0, 50.0 + 0.9 * math.pi / ell * 255, 256)
    ds = synth_dataset(G, n, "helmholtz", source_points(2.0, 2), ell, sweep, 30, n1=1.0)
    ry = np.linalg.norm(ds.x - ds.y_for(), axis=1)[:, None]
    rz = np.linalg.norm(ds.x - ds.z_for(), axis=1)[:, None]
    ay, az = 1 / (4 * math.pi * ry), 1 / (4 * math.pi * rz)
    expected = ay**2 + az**2 + 2 * ay * az * np.cos(sweep.ks() * (rz - ry))
    np.testing.assert_allclose(ds.f, expected, rtol=1e-12, atol=1e-18)


def test_helmholtz_rho_bound_per_record():
    n = single_bump([0.2, 0, 0], 0.5, 0.05, baseline=1.0)
    ell = geo.min_ell_helmholtz(G, 1.05) * 1.05
    sweep = KSweep(50.0, 50.0 + 0.9 * math.pi / ell * 127, 128)
    # the synthesiser itself raises if any record breaks the bound beyond eikonal slack
    ds = synth_dataset(G, n, "helmholtz", source_points(2.0, 2), ell, sweep, 30, n1=1.05)
    assert np.all(ds.f >= 0) and ds.n_records > 0


def test_noise_and_remainder_are_seeded():
    kw = dict(noise=0.01, seed=3)
    a = synth_dataset(G, Q, "schrodinger", source_points(2.0, 1), ELL_S, KSweep(1e3, 5e3, 8, "km"), 20, **kw)
    b = synth_dataset(G, Q, "schrodinger", source_points(2.0, 1), ELL_S, KSweep(1e3, 5e3, 8, "km"), 20, **kw)
    np.testing.assert_array_equal(a.f, b.f)
    c = synth_dataset(G, Q, "schrodinger", source_points(2.0, 1), ELL_S, KSweep(1e3, 5e3, 8, "km"), 20,
                      remainder_c=2.0)
    d = synth_dataset(G, Q, "schrodinger", source_points(2.0, 1), ELL_S, KSweep(1e3, 5e3, 8, "km"), 20)
    np.testing.assert_allclose(c.f - d.f, 2.0 / c.k**2, rtol=1e-6)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_dataset_round_trip(seed):
    ds = synth_dataset(G, Q, "schrodinger", source_points(2.0, 1), ELL_S, KSweep(1e3, 5e3, 8, "km"), 10,
                       noise=0.001, seed=seed)
    back = PhaselessDataset.from_bytes(ds.to_bytes())
    np.testing.assert_array_equal(back.f, ds.f)
    np.testing.assert_array_equal(back.k, ds.k)
    np.testing.assert_array_equal(back.x, ds.x)
    assert back.header() == ds.header()
    with pytest.raises(ForwardError):
        PhaselessDataset.from_bytes(b"garbage!" + bytes(16))


def test_helmholtz_intensity_closed_form():
    k = np.linspace(10, 20, 7)
    f = helmholtz_intensity(0.1, 1.0, 0.05, 3.0, k)
    np.testing.assert_allclose(f, 0.01 + 0.0025 + 2 * 0.1 * 0.05 * np.cos(2.0 * k), rtol=1e-13)
