"""Closed-form CSL excitation and radiation rates, nuclear and atomic constraints.

All inputs are CGS except photon/transition energies, which are in keV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.special import eval_genlaguerre, factorial

from . import constants as const
from .params import CslParams, ParticleSpecies

GRW_REFERENCE = CslParams.grw()


# -- matrix elements ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MatrixElementSet:
    """Transition matrix elements <phi|.|psi> of the collective coordinates.

    dipole: <phi|R|psi> (cm), quadrupole: <phi|S^mn|psi> (cm^2),
    monopole_trace: <phi|S|psi> = trace of the quadrupole tensor.
    """

    dipole: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=complex))
    quadrupole: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=complex))
    monopole_trace: complex | None = None

    def __post_init__(self):
        d = np.asarray(self.dipole, dtype=complex).reshape(3)
        q = np.asarray(self.quadrupole, dtype=complex).reshape(3, 3)
        scale = max(1e-300, float(np.abs(q).max()))
        if np.abs(q - q.T).max() > 1e-12 * scale:
            raise ValueError("quadrupole tensor must be symmetric")
        tr = complex(np.trace(q))
        if self.monopole_trace is None:
            mono = tr
        else:
            mono = complex(self.monopole_trace)
            if abs(mono - tr) > 1e-12 * max(scale, abs(mono)):
                raise ValueError("monopole_trace must equal the quadrupole trace")
        object.__setattr__(self, "dipole", d)
        object.__setattr__(self, "quadrupole", q)
        object.__setattr__(self, "monopole_trace", mono)


def relative_coordinates(positions, masses) -> np.ndarray:
    """R_j = x_j - Q with Q the centre of mass; positions (N, 3), masses (N,)."""
    x = np.asarray(positions, dtype=float)
    m = np.asarray(masses, dtype=float)
    Q = (m[:, None] * x).sum(axis=0) / m.sum()
    return x - Q


def collective_dipole(positions, masses, couplings) -> np.ndarray:
    """R = sum_j g_j R_j for one classical configuration."""
    R = relative_coordinates(positions, masses)
    return np.asarray(couplings, dtype=float) @ R


def collective_quadrupole(positions, masses, couplings) -> np.ndarray:
    """S^mn = sum_j g_j R_j^m R_j^n for one classical configuration."""
    R = relative_coordinates(positions, masses)
    return np.einsum("j,jm,jn->mn", np.asarray(couplings, dtype=float), R, R)


def transition_elements(R_ops, psi, phi) -> np.ndarray:
    """<phi|R_m|psi> for each operator in ``R_ops`` (shape (k, n, n))."""
    R = np.asarray(R_ops)
    return np.einsum("i,kij,j->k", np.conj(phi), R, psi)


def dipole_variance(R_ops, psi) -> float:
    """<psi|[R - <R>]^2|psi> summed over the vector components."""
    R = np.asarray(R_ops)
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    mean = np.real(np.einsum("i,kij,j->k", psi.conj(), R, psi))
    sq = np.real(np.einsum("i,kij,kjl,l->", psi.conj(), R, R, psi))
    return float(sq - mean @ mean)


# -- excitation rates -----------------------------------------------------------

def dipole_excitation_rate(elements: MatrixElementSet, params: CslParams) -> float:
    """(lambda / 2a^2) |<phi|R|psi>|^2, valid while the bound system is much smaller than a."""
    d = elements.dipole
    return params.lambda_ / (2.0 * params.a**2) * float(np.real(np.vdot(d, d)))


def total_excitation_rate(state_variance_of_R: float, params: CslParams) -> float:
    if state_variance_of_R < 0:
        raise ValueError("variance must be non-negative")
    return params.lambda_ / (2.0 * params.a**2) * state_variance_of_R


def quadrupole_excitation_rate(elements: MatrixElementSet, params: CslParams) -> float:
    q = elements.quadrupole
    s = elements.monopole_trace
    return params.lambda_ / (16.0 * params.a**4) * (abs(s) ** 2 + 2.0 * float(np.sum(np.abs(q) ** 2)))


def free_particle_radiation_spectrum(E, species: ParticleSpecies, params: CslParams):
    """Photons emitted per second per keV by a free particle, at photon energy ``E`` (keV)."""
    E = np.asarray(E, dtype=float)
    if np.any(E <= 0):
        raise ValueError("photon energy must be positive")
    g = params.coupling(species)
    compton = const.HBAR / (species.mass * const.C_LIGHT)
    coeff = g * g * params.lambda_ / (4.0 * math.pi**2) * const.ALPHA * (compton / params.a) ** 2
    out = coeff / E
    return float(out) if out.ndim == 0 else out


def hydrogenic_radial(n: int, l: int, Z: float, r, a0: float = 1.0):
    """Normalized hydrogenic radial function R_nl(r) (lengths in units of a0 by default)."""
    r = np.asarray(r, dtype=float)
    rho = 2.0 * Z * r / (n * a0)
    norm = math.sqrt((2.0 * Z / (n * a0)) ** 3 * factorial(n - l - 1) / (2.0 * n * factorial(n + l)))
    return norm * np.exp(-rho / 2.0) * rho**l * eval_genlaguerre(n - l - 1, 2 * l + 1, rho)


def hydrogenic_dipole_element(n_i: int, l_i: int, n_f: int, Z: float = 1.0, a0: float = 1.0,
                              r_max: float | None = None, n_grid: int = 20001) -> np.ndarray:
    """<n_f, l_i+1, m=0| R |n_i, l_i, m=0> for a one-electron atom, on a radial grid.

    Only the z component is non-zero.  The angular factor is
    (l+1)/sqrt((2l+1)(2l+3)).
    """
    l_f = l_i + 1
    if r_max is None:
        r_max = 60.0 * max(n_i, n_f) ** 2 * a0 / Z
    r = np.linspace(0.0, r_max, n_grid)
    integrand = hydrogenic_radial(n_f, l_f, Z, r, a0) * hydrogenic_radial(n_i, l_i, Z, r, a0) * r**3
    radial = simpson(integrand, x=r)
    angular = (l_i + 1) / math.sqrt((2 * l_i + 1) * (2 * l_i + 3))
    return np.array([0.0, 0.0, radial * angular], dtype=complex)


# -- nuclear constraint chain ---------------------------------------------------

@dataclass(frozen=True)
class NuclearConfig:
    mass_number: int
    atomic_number: int
    transition_energy: float  # keV
    isotopic_fraction: float
    radial_suppression: float = 1.0
    degeneracy: int = 12
    lifetime: float | None = None  # s

    def __post_init__(self):
        if not 0 <= self.isotopic_fraction <= 1:
            raise ValueError("isotopic fraction must lie in [0, 1]")
        if not 0 < self.radial_suppression <= 1:
            raise ValueError("radial suppression beta must lie in (0, 1]")
        if not self.mass_number >= self.atomic_number >= 1:
            raise ValueError("need A >= Z >= 1")
        if self.degeneracy < 1:
            raise ValueError("degeneracy must be >= 1")

    @property
    def nuclear_radius(self) -> float:
        return const.NUCLEAR_RADIUS_UNIT * self.mass_number ** (1.0 / 3.0)


# Ge-74 -> 2165 keV 1- state, enriched Rico Grande crystals
GE74_2165 = NuclearConfig(74, 32, 2165.0, 0.14, 1.0)


def nuclear_excitation_rate(config: NuclearConfig, g_n: float, params: CslParams) -> float:
    """Per-nucleus excitation rate (lambda/a^2) (1 - g_n)^2 beta^2 R0^2, for ``degeneracy`` final states.

    Uses the step-function (Weisskopf) radial estimate with the 9/8 prefactor
    set to 1.  The rate is proportional to ``degeneracy`` (12 by default).
    """
    if g_n < 0:
        raise ValueError("g_n must be non-negative")
    beta = config.radial_suppression
    return (params.lambda_ / params.a**2 * (1.0 - g_n) ** 2 * beta**2 * config.nuclear_radius**2
            * config.degeneracy / 12.0)


def nuclear_count_prefactor(config: NuclearConfig, params: CslParams) -> float:
    """Expected counts per (beta^2 (1 - g_n)^2 X kg day); about 1/4 for A = 74 at GRW values."""
    unit = NuclearConfig(config.mass_number, config.atomic_number, config.transition_energy,
                         1.0, 1.0, config.degeneracy)
    return nuclear_excitation_rate(unit, 0.0, params) * const.GE_ATOMS_PER_KG * const.SECONDS_PER_DAY


def expected_nuclear_counts(config: NuclearConfig, g_n: float, exposure: float, params: CslParams) -> float:
    """Expected counts in a run of ``exposure`` kg-days."""
    if exposure < 0:
        raise ValueError("exposure must be non-negative")
    rate = nuclear_excitation_rate(config, g_n, params)
    return rate * config.isotopic_fraction * const.GE_ATOMS_PER_KG * exposure * const.SECONDS_PER_DAY


def weisskopf_lifetime(E: float, mass_number: int, beta: float = 1.0) -> float:
    """E1 lifetime (s) with the step-function radial estimate.

    The squared matrix element summed over m is (1/4 pi)(3 beta R0 / 4)^2.
    """
    R0 = const.NUCLEAR_RADIUS_UNIT * mass_number ** (1.0 / 3.0)
    S = (3.0 * beta * R0 / 4.0) ** 2 / (4.0 * math.pi)
    k = E * const.KEV / (const.HBAR * const.C_LIGHT)
    inv_tau = 16.0 * math.pi * const.C_LIGHT / 9.0 * k**3 * const.ALPHA * S
    return 1.0 / inv_tau


def gamma_from_lifetime(E: float, tau: float, g_n: float, params: CslParams, degeneracy: int = 12) -> float:
    """Excitation rate expressed through the measured E1 lifetime of the excited state.

    (lambda/2a^2)(1-g_n)^2 (3 degeneracy/4) / (c alpha) (hbar c/E)^3 / tau;
    the factor 3*12/4 = 9 for the default degeneracy.
    """
    if tau <= 0 or E <= 0:
        raise ValueError("need tau > 0 and E > 0")
    hbar_c_over_E = const.HBAR * const.C_LIGHT / (E * const.KEV)
    return (params.lambda_ / (2.0 * params.a**2) * (1.0 - g_n) ** 2 * (0.75 * degeneracy)
            / (const.C_LIGHT * const.ALPHA) * hbar_c_over_E**3 / tau)


@dataclass(frozen=True)
class ConstraintResult:
    parameter: str
    lower: float
    upper: float
    confidence: float | None
    scale: float
    unit: float = 1.0
    unit_name: str = ""
    details: tuple = ()

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")

    @property
    def lower_in_units(self) -> float:
        return self.lower / self.unit

    @property
    def upper_in_units(self) -> float:
        return self.upper / self.unit

    def report(self) -> str:
        cl = "n/a" if self.confidence is None else f"{100 * self.confidence:g}%"
        lines = [
            f"parameter: {self.parameter}",
            f"interval: [{self.lower:.6g}, {self.upper:.6g}]",
        ]
        if self.unit_name:
            lines.append(f"interval_in_{self.unit_name}: [{self.lower_in_units:.4g}, {self.upper_in_units:.4g}]")
        lines += [f"confidence: {cl}", f"scale_lambda_over_a2_vs_grw: {self.scale:.6g}"]
        lines += [f"{k}: {v}" for k, v in self.details]
        return "\n".join(lines)


def gn_coefficient(X: float, D: float, params: CslParams, mass_number: int = 74) -> float:
    """k in g_n = 1 +/- k sqrt(C_expt)/beta; about 0.26 for X = 0.14, D = 414.3 at GRW values."""
    pref = nuclear_count_prefactor(NuclearConfig(mass_number, 1, 0.0, 1.0), params)
    return 1.0 / math.sqrt(pref * X * D)


def gn_bounds(C_expt: float, beta: float, X: float, D: float, params: CslParams,
              confidence: float | None = None, mass_number: int = 74) -> ConstraintResult:
    """Interval on g_n/g_p allowed by an upper limit of ``C_expt`` counts in the line."""
    if C_expt < 0 or beta <= 0:
        raise ValueError("need C_expt >= 0 and beta > 0")
    k = gn_coefficient(X, D, params, mass_number)
    half = k * math.sqrt(C_expt) / beta
    return ConstraintResult("g_n/g_p", max(0.0, 1.0 - half), 1.0 + half, confidence,
                            params.scale_vs_grw, details=(("k", f"{k:.4f}"), ("C_expt", C_expt),
                                                          ("beta", beta), ("X", X), ("D_kg_days", D)))


# -- atomic (1s ionization) signal ------------------------------------------------

@dataclass(frozen=True)
class AtomicSignalModel:
    """Predicted Ge 1s ionization pulse spectrum C(E) for g_e = 1 at GRW values.

    A single exponential through the first and last anchors; the middle
    anchor is a consistency check, not a fit point.
    """

    threshold: float = 11.1  # keV
    anchors: tuple = ((11.1, 5370.0), (12.0, 4000.0), (16.0, 1500.0))  # keV, counts/keV/kg/day

    @property
    def peak_rate(self) -> float:
        return self.anchors[0][1]

    @property
    def decay_constant(self) -> float:
        (e0, c0), (e1, c1) = self.anchors[0], self.anchors[-1]
        return (e1 - e0) / math.log(c0 / c1)

    def template(self, e_min: float, e_max: float, step: float = 0.005):
        """Sampled curve on [e_min, e_max] with the threshold step represented exactly."""
        lo = np.arange(e_min, self.threshold, step)
        hi = np.arange(self.threshold, e_max + step / 2, step)
        E = np.concatenate([lo, [self.threshold], hi])
        vals = np.concatenate([np.zeros(lo.size + 1), c_of_e(hi, self)])
        return E, vals


DEFAULT_SIGNAL = AtomicSignalModel()


def c_of_e(E, model: AtomicSignalModel = DEFAULT_SIGNAL):
    """C(E) in counts/keV/kg/day."""
    E = np.asarray(E, dtype=float)
    if np.any(E < 0):
        raise ValueError("energy must be non-negative")
    above = E >= model.threshold
    out = np.where(above, model.peak_rate * np.exp(-(np.where(above, E, model.threshold) - model.threshold)
                                                   / model.decay_constant), 0.0)
    return float(out) if out.ndim == 0 else out


def electron_ionization_rate(E, g_e: float, params: CslParams, model: AtomicSignalModel = DEFAULT_SIGNAL):
    """Expected 1s-ionization pulse rate (counts/keV/kg/day) with g_n = g_p = 1."""
    if g_e < 0:
        raise ValueError("g_e must be non-negative")
    return params.scale_vs_grw * (g_e - const.ELECTRON_PROTON_MASS_RATIO) ** 2 * c_of_e(E, model)


def constrain_ge(signal_fraction_limit: float, scale: float = 1.0,
                 confidence: float | None = None) -> ConstraintResult:
    """Interval on g_e/g_p from an upper limit on the fitted multiple of C(E)."""
    if signal_fraction_limit < 0:
        raise ValueError("signal limit must be non-negative")
    r = const.ELECTRON_PROTON_MASS_RATIO
    half = math.sqrt(signal_fraction_limit / scale)
    return ConstraintResult("g_e/g_p", max(0.0, r - half), r + half, confidence, scale,
                            unit=r, unit_name="Me_over_Mp",
                            details=(("signal_fraction_limit", signal_fraction_limit),))
