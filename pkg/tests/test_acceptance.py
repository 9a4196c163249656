"""Acceptance criteria 1-9, each reported as a single pass/fail line."""
from __future__ import annotations

import math

import numpy as np

from cslkit import CslParams, LatticeSystem
from cslkit import constants as const
from cslkit.collapse_dynamics import sample_outcome_statistics
from cslkit.density_evolution import (DensityMatrix, energy_slope, internal_rate_leading_order,
                                      lattice_hamiltonian, mean_energy_rate, measured_decay_rate)
from cslkit.excitation_rates import (GE74_2165, MatrixElementSet, c_of_e, collective_dipole, constrain_ge,
                                     dipole_excitation_rate, free_particle_radiation_spectrum, gn_bounds,
                                     gn_coefficient, nuclear_count_prefactor)
from cslkit.params import ELECTRON, NEUTRON, PROTON, ParticleSpecies
from cslkit.spectrum_analysis import (COSME_EXPOSURE, COSME_WINDOW, SignalProfile, Spectrum,
                                      cosme_like_model, expected_counts, fit_spectrum, synth_spectrum,
                                      uniform_edges)

GRW = CslParams()
ME_MP = const.ELECTRON_PROTON_MASS_RATIO
EDGES = uniform_edges(*COSME_WINDOW, 0.1)
SIGMA = 0.18
N_SEEDS = 200


def test_criterion_1_born_rule(acceptance):
    parts, ok = [], True
    for p2 in (0.1, 0.25, 0.5):
        n = 10_000
        stats = sample_outcome_statistics([math.sqrt(1 - p2), math.sqrt(p2)], 1.0, n, 20.0,
                                          seed=int(1000 * p2))
        band = 3 * math.sqrt(p2 * (1 - p2) / n)
        f = float(stats.frequencies[1])
        ok &= abs(f - p2) <= band and stats.n_uncollapsed == 0
        parts.append(f"p2={p2}: {f:.4f} (band ±{band:.4f})")
    acceptance("1 (Born rule, 3 sigma, n=1e4)", ok, "; ".join(parts))


def test_criterion_2_decoherence_rate(acceptance):
    a = 1.0
    params = CslParams(0.01, a)
    parts, ok = [], True
    for N in (1, 2, 4):
        system = LatticeSystem.two_clumps(N, 10 * a, clump_size=0.01 * a)
        measured = measured_decay_rate(system, params, t=100.0)
        rel = measured / (params.lambda_ * N * N) - 1
        ok &= abs(rel) <= 0.02
        parts.append(f"N={N}: {rel:+.2e}")
    acceptance("2 (decay vs lambda g^2 N^2, 2%)", ok, "; ".join(parts))


def test_criterion_3_energy_gain(acceptance):
    nucleons = mean_energy_rate({PROTON: 1e24}, GRW)
    electrons = mean_energy_rate({ELECTRON: 1e24}, GRW)
    sp = ParticleSpecies("particle", 1.0, 0.0, "p")
    system = LatticeSystem.line(121, 0.1, species="particle", origin=-6.0, species_table={"particle": sp})
    H = lattice_hamiltonian(system, 1.0, 1.0, potential=lambda x: 0.5 * x * x)
    ground = np.linalg.eigh(H)[1][:, 0]
    params = CslParams(0.01, 1.0)
    slope = energy_slope(DensityMatrix.pure(ground, system), H, system, params, 1.0, 0.01)
    closed = mean_energy_rate({sp: 1}, params, hbar=1.0, dim=1, energy_unit=1.0)
    rel = slope / closed - 1
    ok = round(nucleons, 2) == 0.31 and float(f"{electrons:.2g}") == 570.0 and abs(rel) <= 0.01
    acceptance("3 (energy gain)", ok,
               f"nucleons {nucleons:.4f} eV/s, electrons {electrons:.1f} eV/s, slope rel {rel:+.2e}")


def test_criterion_4_mass_proportionality(acceptance):
    rng = np.random.default_rng(4)
    masses = np.array([const.PROTON_MASS, const.NEUTRON_MASS, const.ELECTRON_MASS] * 4)
    species = [PROTON, NEUTRON, ELECTRON] * 4
    worst_dipole = worst_internal = 0.0
    for _ in range(50):
        pos = rng.normal(scale=1e-8, size=(masses.size, 3))
        unit = np.ones(masses.size)
        ref = dipole_excitation_rate(MatrixElementSet(dipole=collective_dipole(pos, masses, unit)), GRW)
        prop = dipole_excitation_rate(
            MatrixElementSet(dipole=collective_dipole(pos, masses, masses / const.PROTON_MASS)), GRW)
        worst_dipole = max(worst_dipole, prop / ref)
    mp = CslParams.mass_proportional()
    for n_p, n_n, n_e in [(1, 0, 1), (26, 30, 26), (32, 42, 32), (1e24, 1e24, 1e24)]:
        counts = {PROTON: n_p, NEUTRON: n_n, ELECTRON: n_e}
        rel = abs(internal_rate_leading_order(counts, mp)) / mean_energy_rate(counts, mp)
        worst_internal = max(worst_internal, rel)
    ok = worst_dipole < 1e-12 and worst_internal <= 1e-12
    acceptance("4 (mass proportionality)", ok,
               f"dipole ratio {worst_dipole:.1e}, internal relative {worst_internal:.1e}")


def test_criterion_5_free_particle_constant(acceptance):
    k = free_particle_radiation_spectrum(1.0, ELECTRON, GRW)
    acceptance("5 (free-electron constant)", 2.7e-31 <= k <= 3.1e-31, f"{k:.4e} counts/s/keV x E_keV")


def test_criterion_6_nuclear_chain(acceptance):
    pref = nuclear_count_prefactor(GE74_2165, GRW)
    k = gn_coefficient(0.14, 414.3, GRW)
    base = gn_bounds(0.89, 0.3, 0.14, 414.3, GRW)
    scaled = gn_bounds(0.89, 0.3, 0.14, 414.3, CslParams(1e-14, 1e-5))
    ok = (abs(pref / 0.25 - 1) <= 0.02 and abs(k - 0.26) <= 0.01
          and (round(base.lower, 1), round(base.upper, 1)) == (0.2, 1.8)
          and (round(scaled.lower, 1), round(scaled.upper, 1)) == (0.9, 1.1))
    acceptance("6 (nuclear chain)", ok,
               f"prefactor {pref:.4f}, k {k:.4f}, g_n in [{base.lower:.3f}, {base.upper:.3f}], "
               f"x100 [{scaled.lower:.3f}, {scaled.upper:.3f}]")


def test_criterion_7_electron_constraint(acceptance):
    wide = constrain_ge(4.2e-5)
    narrow = constrain_ge(4.2e-5 / 300)
    ok = (abs(wide.upper_in_units - 12.9) <= 0.1 and abs(narrow.lower_in_units - 0.3) <= 0.05
          and abs(narrow.upper_in_units - 1.7) <= 0.05)
    acceptance("7 (electron constraint)", ok,
               f"upper {wide.upper_in_units:.3f} Me/Mp; /300 gives "
               f"[{narrow.lower_in_units:.3f}, {narrow.upper_in_units:.3f}]")


def test_criterion_8_signal_model(acceptance):
    c111, c16, c12 = c_of_e(11.1), c_of_e(16.0), c_of_e(12.0)
    ok = c111 == 5370.0 and abs(c16 / 1500 - 1) <= 0.01 and abs(c12 / 4000 - 1) <= 0.10
    acceptance("8 (C(E) anchors)", ok, f"C(11.1)={c111:g}, C(16)={c16:.1f}, C(12)={c12:.0f}")


def _cosme(seed, s=0.0):
    return synth_spectrum(cosme_like_model(s), COSME_EXPOSURE, EDGES, seed, SIGMA)


def _fit_model():
    return cosme_like_model(0.0).with_peaks_at([8.05, 8.64, 9.25])


def test_criterion_9_fitting_pipeline(acceptance):
    parts, ok = [], True
    # (a) noiseless data
    truth = cosme_like_model(1e-4)
    asimov = Spectrum(EDGES, expected_counts(truth, EDGES, COSME_EXPOSURE, SIGMA), COSME_EXPOSURE, SIGMA)
    worst = 0.0
    for statistic in ("pearson", "poisson"):
        res = fit_spectrum(asimov, _fit_model(), statistic=statistic, scan_points=0)
        got = np.r_[res.signal, list(res.parameters.values())]
        want = np.r_[1e-4, list(truth.background), [a for _, a in truth.peaks]]
        worst = max(worst, float(np.max(np.abs(got / want - 1))))
    ok_a = worst <= 1e-6
    parts.append(f"(a) {'ok' if ok_a else 'FAIL'} max rel {worst:.1e}")
    # (b) injection and recovery at three decades, (d) monotonicity on every spectrum
    monotone = True
    bias_parts = []
    ok_b = True
    for k, s0 in enumerate((1e-5, 1e-4, 1e-3)):
        hats = []
        for seed in range(N_SEEDS):
            prof = SignalProfile(_cosme(10_000 * (k + 1) + seed, s0), _fit_model())
            hats.append(prof.s_hat)
            monotone &= prof.upper_limit(0.95) >= prof.upper_limit(0.68) >= 0
        hats = np.array(hats)
        z = (hats.mean() - s0) / (hats.std(ddof=1) / math.sqrt(N_SEEDS))
        ok_b &= abs(z) <= 3
        bias_parts.append(f"{s0:g}:{z:+.1f}")
    parts.append(f"(b) {'ok' if ok_b else 'FAIL'} bias z {' '.join(bias_parts)}")
    # (c) coverage of the two-sided 68% interval, (e) median limit scale
    covered, limits = 0, []
    for seed in range(N_SEEDS):
        prof = SignalProfile(_cosme(seed), _fit_model())
        lo, hi = prof.interval(0.68)
        covered += lo <= 0.0 <= hi
        ul68 = prof.upper_limit(0.68)
        monotone &= prof.upper_limit(0.95) >= ul68 >= 0
        limits.append(ul68)
    coverage = covered / N_SEEDS
    ok_c = abs(coverage - 0.68) <= 0.10
    parts.append(f"(c) {'ok' if ok_c else 'FAIL'} coverage {coverage:.3f}")
    parts.append(f"(d) {'ok' if monotone else 'FAIL'} monotone on {4 * N_SEEDS} spectra")
    median = float(np.median(limits))
    ok_e = 4.2e-6 <= median <= 4.2e-4
    parts.append(f"(e) {'ok' if ok_e else 'FAIL'} median UL68 {median:.2e}")
    ok = ok_a and ok_b and ok_c and monotone and ok_e
    acceptance("9 (fitting pipeline)", ok, "; ".join(parts))

