from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.integrate import quad

from cslkit import CslParams
from cslkit import constants as const
from cslkit.excitation_rates import (DEFAULT_SIGNAL, GE74_2165, ConstraintResult, MatrixElementSet,
                                     NuclearConfig, c_of_e, collective_dipole, collective_quadrupole,
                                     constrain_ge, dipole_excitation_rate, dipole_variance,
                                     electron_ionization_rate, expected_nuclear_counts,
                                     free_particle_radiation_spectrum, gamma_from_lifetime, gn_bounds,
                                     gn_coefficient, hydrogenic_dipole_element, hydrogenic_radial,
                                     nuclear_count_prefactor, nuclear_excitation_rate,
                                     quadrupole_excitation_rate, relative_coordinates,
                                     total_excitation_rate, transition_elements, weisskopf_lifetime)
from cslkit.params import ELECTRON, PROTON

GRW = CslParams()
ME_MP = const.ELECTRON_PROTON_MASS_RATIO
BOHR = 0.529177e-8  # cm

positions3 = st.lists(st.tuples(*[st.floats(-1e-8, 1e-8)] * 3), min_size=2, max_size=8)


# -- matrix-element containers ----------------------------------------------------------

def test_matrix_element_set_validation():
    with pytest.raises(ValueError, match="symmetric"):
        MatrixElementSet(quadrupole=[[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    with pytest.raises(ValueError, match="trace"):
        MatrixElementSet(quadrupole=np.eye(3), monopole_trace=2.0)
    assert MatrixElementSet(quadrupole=np.eye(3)).monopole_trace == 3.0


# -- dipole channel -----------------------------------------------------------------------

def test_zero_dipole_gives_zero_rate():
    assert dipole_excitation_rate(MatrixElementSet(), GRW) == 0.0


@given(positions3)
def test_mass_proportional_couplings_kill_the_dipole(pos):
    pos = np.array(pos)
    n = len(pos)
    masses = np.array([const.PROTON_MASS, const.NEUTRON_MASS, const.ELECTRON_MASS] * 3)[:n]
    g = masses / const.PROTON_MASS
    R = collective_dipole(pos, masses, g)
    # rounding of the centre of mass is relative to the raw coordinates
    scale = float(np.sum(g * np.linalg.norm(pos, axis=1)))
    assume(scale > 0)
    assert np.linalg.norm(R) < 1e-12 * scale
    assert dipole_excitation_rate(MatrixElementSet(dipole=R), GRW) <= 1e-24 * GRW.lambda_ / GRW.a**2 * scale**2


@given(positions3)
def test_equal_nucleon_masses_center_of_mass_identity(pos):
    pos = np.array(pos)
    n = len(pos)
    is_p = np.arange(n) % 2 == 0
    masses = np.full(n, const.PROTON_MASS)
    R = relative_coordinates(pos, masses)
    lhs, rhs = R[~is_p].sum(axis=0), -R[is_p].sum(axis=0)
    scale = np.abs(pos).sum()
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale


def test_hydrogen_1s_2p_element_against_quadrature_and_closed_form():
    elem = hydrogenic_dipole_element(1, 0, 2)
    r1s = lambda r: 2.0 * math.exp(-r)
    r2p = lambda r: r * math.exp(-r / 2) / math.sqrt(24.0)
    radial, _ = quad(lambda r: r2p(r) * r1s(r) * r**3, 0, np.inf)
    oracle = radial / math.sqrt(3.0)
    assert elem[2].real == pytest.approx(oracle, rel=1e-8)
    assert elem[2].real == pytest.approx(128 * math.sqrt(2) / 243, rel=1e-8)
    assert np.all(elem[:2] == 0)


def test_hydrogenic_radial_is_normalized():
    for n, l in [(1, 0), (2, 0), (2, 1), (3, 2)]:
        norm, _ = quad(lambda r: hydrogenic_radial(n, l, 1.0, r) ** 2 * r * r, 0, np.inf)
        assert norm == pytest.approx(1.0, rel=1e-9)


def test_hydrogen_dipole_rate_and_z_scaling():
    d = hydrogenic_dipole_element(1, 0, 2, Z=1.0, a0=BOHR)
    rate = dipole_excitation_rate(MatrixElementSet(dipole=d), GRW)
    assert rate == pytest.approx(GRW.lambda_ / (2 * GRW.a**2) * (0.7449355 * BOHR) ** 2, rel=1e-6)
    # order of magnitude g_e^2 1e-23 / Z^2
    assert 1e-24 < rate < 1e-22
    d4 = hydrogenic_dipole_element(1, 0, 2, Z=4.0, a0=BOHR)
    rate4 = dipole_excitation_rate(MatrixElementSet(dipole=d4), GRW)
    assert rate4 == pytest.approx(rate / 16.0, rel=1e-6)


def test_completeness_sum_equals_total_rate():
    rng = np.random.default_rng(4)
    n = 8
    R_ops = []
    for _ in range(3):
        M = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        R_ops.append((M + M.conj().T) * 1e-9)
    R_ops = np.array(R_ops)
    Hm = rng.normal(size=(n, n))
    basis = np.linalg.eigh(Hm + Hm.T)[1].T
    psi = basis[0]
    summed = sum(dipole_excitation_rate(MatrixElementSet(dipole=transition_elements(R_ops, psi, phi)), GRW)
                 for phi in basis[1:])
    total = total_excitation_rate(dipole_variance(R_ops, psi), GRW)
    assert summed == pytest.approx(total, rel=1e-10)


def test_total_rate_zero_variance_and_quadratic_scaling():
    assert total_excitation_rate(0.0, GRW) == 0.0
    with pytest.raises(ValueError):
        total_excitation_rate(-1.0, GRW)
    pos = np.array([[0, 0, 0], [1e-8, 0, 0], [0, 2e-8, 0]])
    m = np.array([const.PROTON_MASS, const.ELECTRON_MASS, const.NEUTRON_MASS])
    g = np.array([1.0, 0.3, 0.7])
    r1 = dipole_excitation_rate(MatrixElementSet(dipole=collective_dipole(pos, m, g)), GRW)
    r2 = dipole_excitation_rate(MatrixElementSet(dipole=collective_dipole(pos, m, 2 * g)), GRW)
    assert r2 == pytest.approx(4 * r1, rel=1e-12)


# -- quadrupole channel -------------------------------------------------------------------

def test_quadrupole_zero_and_isotropic():
    assert quadrupole_excitation_rate(MatrixElementSet(), GRW) == 0.0
    lam, a, s = 2.0, 3.0, 0.7
    rate = quadrupole_excitation_rate(MatrixElementSet(quadrupole=s * np.eye(3)), CslParams(lam, a))
    assert rate == pytest.approx(15 * lam * s * s / (16 * a**4), rel=1e-14)


@pytest.mark.parametrize("ell", [1e-9, 3e-9])
def test_quadrupole_to_dipole_ratio_oscillator(ell):
    # 1-D oscillator: <1|x|0> = ell/sqrt2, <2|x^2|0> = ell^2/sqrt2
    dip = MatrixElementSet(dipole=[ell / math.sqrt(2), 0, 0])
    q = np.zeros((3, 3))
    q[0, 0] = ell**2 / math.sqrt(2)
    quad_el = MatrixElementSet(quadrupole=q)
    ratio = quadrupole_excitation_rate(quad_el, GRW) / dipole_excitation_rate(dip, GRW)
    assert ratio == pytest.approx(3.0 / 8.0 * (ell / GRW.a) ** 2, rel=1e-12)


def test_collective_quadrupole_is_symmetric_with_trace_equal_to_sum():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(5, 3))
    m = rng.uniform(1, 2, 5)
    g = rng.uniform(0, 1, 5)
    S = collective_quadrupole(pos, m, g)
    np.testing.assert_allclose(S, S.T)
    R = relative_coordinates(pos, m)
    assert np.trace(S) == pytest.approx(float(np.sum(g * np.sum(R * R, axis=1))))


# -- scaling invariants -------------------------------------------------------------------

def test_rates_linear_in_lambda_and_powers_of_a():
    el = MatrixElementSet(dipole=[1e-8, 0, 0], quadrupole=np.diag([1e-16, 2e-16, 0]))
    p1, p2, p3 = CslParams(1e-16, 1e-5), CslParams(3e-16, 1e-5), CslParams(1e-16, 2e-5)
    for f, power in ((dipole_excitation_rate, 2), (quadrupole_excitation_rate, 4)):
        r1, r2, r3 = f(el, p1), f(el, p2), f(el, p3)
        assert r1 >= 0
        assert r2 == pytest.approx(3 * r1, rel=1e-12)
        assert r3 == pytest.approx(r1 / 2**power, rel=1e-12)
    f1 = free_particle_radiation_spectrum(2.0, ELECTRON, p1)
    assert free_particle_radiation_spectrum(2.0, ELECTRON, p3) == pytest.approx(f1 / 4, rel=1e-12)


# -- free-particle radiation -----------------------------------------------------------------

def test_free_electron_constant():
    k = free_particle_radiation_spectrum(1.0, ELECTRON, GRW)
    compton = const.HBAR / (const.ELECTRON_MASS * const.C_LIGHT)
    oracle = 1e-16 / (4 * math.pi**2) / 137.036 * (compton / 1e-5) ** 2
    assert k == pytest.approx(oracle, rel=1e-12)
    assert 2.7e-31 <= k <= 3.1e-31


def test_free_radiation_mass_proportional_equal_and_inverse_energy():
    mp = CslParams.mass_proportional()
    assert free_particle_radiation_spectrum(5.0, ELECTRON, mp) == pytest.approx(
        free_particle_radiation_spectrum(5.0, PROTON, mp), rel=1e-12)
    r = free_particle_radiation_spectrum(np.array([1.0, 2.0]), ELECTRON, GRW)
    assert r[1] == pytest.approx(r[0] / 2, rel=1e-15)
    with pytest.raises(ValueError):
        free_particle_radiation_spectrum(0.0, ELECTRON, GRW)


# -- nuclear chain ------------------------------------------------------------------------------

def test_nuclear_rate_values():
    assert nuclear_excitation_rate(GE74_2165, 1.0, GRW) == 0.0
    cfg = NuclearConfig(74, 32, 2165.0, 0.14, 1.0)
    oracle = 1e-16 / 1e-10 * (1.4e-13 * 74 ** (1 / 3)) ** 2
    assert nuclear_excitation_rate(cfg, 0.0, GRW) == pytest.approx(oracle, rel=1e-12)
    assert nuclear_excitation_rate(cfg, 0.0, GRW) == pytest.approx(3.5e-31, rel=0.02)
    # order of magnitude g_p^2 1e-32 A^(2/3)
    assert 0.1 < nuclear_excitation_rate(cfg, 0.0, GRW) / (1e-32 * 74 ** (2 / 3)) < 10


def test_nuclear_rate_scales_as_a_two_thirds():
    r1 = nuclear_excitation_rate(NuclearConfig(27, 13, 1000.0, 1.0), 0.0, GRW)
    r2 = nuclear_excitation_rate(NuclearConfig(216, 80, 1000.0, 1.0), 0.0, GRW)
    assert r2 / r1 == pytest.approx(4.0, rel=1e-12)


def test_nuclear_config_validation():
    with pytest.raises(ValueError):
        NuclearConfig(74, 32, 2165.0, 1.5)
    with pytest.raises(ValueError):
        NuclearConfig(74, 32, 2165.0, 0.1, radial_suppression=0.0)
    with pytest.raises(ValueError):
        NuclearConfig(10, 32, 2165.0, 0.1)


def test_expected_counts_prefactor_and_examples():
    pref = nuclear_count_prefactor(GE74_2165, GRW)
    assert pref == pytest.approx(0.25, rel=0.02)
    assert expected_nuclear_counts(GE74_2165, 0.0, 414.3, GRW) == pytest.approx(14.4, rel=0.01)
    assert expected_nuclear_counts(GE74_2165, 0.0, 0.0, GRW) == 0.0
    cosme = NuclearConfig(74, 32, 2165.0, 0.37, 1.0)
    assert expected_nuclear_counts(cosme, 0.0, 85.24, GRW) == pytest.approx(7.8, rel=0.01)


def test_degeneracy_scales_rate():
    half = NuclearConfig(74, 32, 2165.0, 0.14, 1.0, degeneracy=6)
    assert nuclear_excitation_rate(half, 0.0, GRW) == pytest.approx(
        0.5 * nuclear_excitation_rate(GE74_2165, 0.0, GRW), rel=1e-14)


def test_gamma_from_lifetime_laws():
    assert gamma_from_lifetime(2165.0, 1e-14, 1.0, GRW) == 0.0
    r1 = gamma_from_lifetime(2165.0, 1e-14, 0.0, GRW)
    assert gamma_from_lifetime(2165.0, 2e-14, 0.0, GRW) == pytest.approx(r1 / 2, rel=1e-14)
    with pytest.raises(ValueError):
        gamma_from_lifetime(2165.0, 0.0, 0.0, GRW)


@pytest.mark.parametrize("beta", [1.0, 0.3])
def test_weisskopf_lifetime_reproduces_nuclear_rate_up_to_nine_eighths(beta):
    tau = weisskopf_lifetime(2165.0, 74, beta)
    via_tau = gamma_from_lifetime(2165.0, tau, 0.0, GRW)
    direct = nuclear_excitation_rate(NuclearConfig(74, 32, 2165.0, 0.14, beta), 0.0, GRW)
    assert via_tau / direct == pytest.approx(9.0 / 8.0, rel=1e-12)


def test_gn_bounds_operating_points():
    res = gn_bounds(0.89, 0.3, 0.14, 414.3, GRW)
    assert (round(res.lower, 1), round(res.upper, 1)) == (0.2, 1.8)
    assert gn_coefficient(0.14, 414.3, GRW) == pytest.approx(0.26, abs=0.01)
    scaled = gn_bounds(0.89, 0.3, 0.14, 414.3, CslParams(1e-14, 1e-5))
    assert (round(scaled.lower, 1), round(scaled.upper, 1)) == (0.9, 1.1)
    assert scaled.scale == pytest.approx(100.0)
    zero = gn_bounds(0.0, 0.3, 0.14, 414.3, GRW)
    assert zero.lower == zero.upper == 1.0


def test_gn_bounds_clip_at_zero():
    res = gn_bounds(100.0, 0.1, 0.14, 414.3, GRW)
    assert res.lower == 0.0
    with pytest.raises(ValueError):
        gn_bounds(-1.0, 0.3, 0.14, 414.3, GRW)


@given(st.floats(0.01, 1.99), st.floats(0.05, 1.0), st.floats(0.01, 1.0), st.floats(1.0, 1e4))
def test_constraint_chain_round_trip(g_star, beta, X, D):
    counts = expected_nuclear_counts(NuclearConfig(74, 32, 2165.0, X, beta), g_star, D, GRW)
    res = gn_bounds(counts, beta, X, D, GRW)
    tol = 1e-9
    assert res.lower - tol <= g_star <= res.upper + tol


def test_constraint_result_invariants_and_report():
    with pytest.raises(ValueError):
        ConstraintResult("x", 2.0, 1.0, 0.68, 1.0)
    text = gn_bounds(0.89, 0.3, 0.14, 414.3, GRW, confidence=0.68).report()
    for token in ("parameter: g_n/g_p", "interval:", "confidence: 68%", "scale_lambda_over_a2_vs_grw: 1"):
        assert token in text


# -- atomic signal ------------------------------------------------------------------------------

def test_c_of_e_anchors():
    assert c_of_e(11.0) == 0.0
    assert c_of_e(11.1) == 5370.0
    assert c_of_e(16.0) == pytest.approx(1500.0, rel=1e-12)
    assert c_of_e(12.0) == pytest.approx(4000.0, rel=0.10)
    assert DEFAULT_SIGNAL.decay_constant == pytest.approx(3.84, abs=0.01)
    with pytest.raises(ValueError):
        c_of_e(-1.0)


@given(st.floats(0.0, 40.0), st.floats(0.0, 40.0))
def test_c_of_e_nonincreasing_above_threshold(e1, e2):
    lo, hi = sorted((e1, e2))
    if lo >= 11.1:
        assert c_of_e(hi) <= c_of_e(lo)
    if hi < 11.1:
        assert c_of_e(hi) == 0.0


def test_electron_ionization_rate_examples():
    E = np.linspace(0, 20, 41)
    assert np.all(electron_ionization_rate(E, ME_MP, GRW) == 0)
    assert electron_ionization_rate(11.1, 1.0, GRW) == pytest.approx((1 - 5.446e-4) ** 2 * 5370, rel=1e-12)
    assert electron_ionization_rate(5.0, 1.0, GRW) == 0.0
    assert electron_ionization_rate(11.1, 1.0, CslParams(1e-15, 1e-5)) == pytest.approx(
        10 * electron_ionization_rate(11.1, 1.0, GRW), rel=1e-12)


def test_constrain_ge_operating_points():
    res = constrain_ge(4.2e-5)
    assert res.upper_in_units == pytest.approx(12.9, abs=0.1)
    assert res.lower == 0.0
    narrow = constrain_ge(4.2e-5 / 300)
    assert narrow.lower_in_units == pytest.approx(0.3, abs=0.05)
    assert narrow.upper_in_units == pytest.approx(1.7, abs=0.05)
    exact = constrain_ge(0.0)
    assert exact.lower == exact.upper == ME_MP
    with pytest.raises(ValueError):
        constrain_ge(-1e-5)


def test_constrain_ge_scale_tightens():
    assert constrain_ge(4.2e-5, scale=100).upper < constrain_ge(4.2e-5).upper
