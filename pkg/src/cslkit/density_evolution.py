"""CSL density-matrix evolution on a configuration basis, and energy-gain laws.

In the position (configuration) basis the collapse part of the master
equation multiplies each element rho[b, b'] by ``-D[b, b']`` with

    D[b, b'] = (lambda/2) sum_jk g_j g_k [Phi(x_j - x_k) + Phi(x'_j - x'_k) - 2 Phi(x_j - x'_k)]

so over a step it is applied exactly as the element-wise factor
``exp(-D dt)``.  The Hamiltonian part is an exact unitary conjugation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from . import constants as const
from .lattice import LatticeSystem
from .params import ConfigurationError, CslParams, ParticleSpecies, StepSizeError

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-9


def phi_kernel(z, a: float):
    """exp(-z^2 / 4a^2); ``z`` may be a scalar, an array of scalars or of vectors (last axis)."""
    if not a > 0:
        raise ValueError("a must be positive")
    z = np.asarray(z, dtype=float)
    return np.exp(-z**2 / (4.0 * a * a))


def _phi_vec(diff: np.ndarray, a: float) -> np.ndarray:
    return np.exp(-np.sum(diff**2, axis=-1) / (4.0 * a * a))


@dataclass(eq=False)
class DensityMatrix:
    data: np.ndarray
    system: LatticeSystem | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError("density matrix must be square")
        if self.system is not None and self.system.n_basis != self.data.shape[0]:
            raise ValueError("density matrix size does not match the system basis")

    @classmethod
    def pure(cls, amplitudes, system: LatticeSystem | None = None) -> "DensityMatrix":
        psi = np.asarray(amplitudes, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), system)

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def expectation(self, operator) -> float:
        return float(np.real(np.trace(np.asarray(operator) @ self.data)))

    def check(self, hermitian_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL, positivity_tol=POSITIVITY_TOL):
        """Raise ``StepSizeError`` if any density-matrix invariant is violated."""
        scale = max(1.0, float(np.abs(self.data).max()))
        if np.abs(self.data - self.data.conj().T).max() > hermitian_tol * scale:
            raise StepSizeError("density matrix lost Hermiticity")
        if abs(self.trace - 1.0) > trace_tol:
            raise StepSizeError(f"trace drifted to {self.trace}")
        lam_min = np.linalg.eigvalsh(0.5 * (self.data + self.data.conj().T)).min()
        if lam_min < -positivity_tol:
            raise StepSizeError(f"negative eigenvalue {lam_min:.3e}; reduce dt")


def decoherence_matrix(system: LatticeSystem, params: CslParams) -> np.ndarray:
    """D[b, b'] for every pair of basis configurations (s^-1)."""
    owner, positions, g, _ = system.particle_table(params)
    nb = system.n_basis
    if owner.size == 0:
        return np.zeros((nb, nb))
    kernel = _phi_vec(positions[:, None, :] - positions[None, :, :], params.a)
    weights = np.zeros((nb, owner.size))
    weights[owner, np.arange(owner.size)] = g
    S = weights @ kernel @ weights.T
    diag = np.diag(S)
    D = 0.5 * params.lambda_ * (diag[:, None] + diag[None, :] - 2.0 * S)
    np.fill_diagonal(D, 0.0)
    return D


def evolve_density(rho: DensityMatrix, hamiltonian, system: LatticeSystem, params: CslParams,
                   t: float, dt: float, hbar: float = 1.0, check_every: int = 1,
                   observer: Callable[[float, DensityMatrix], None] | None = None) -> DensityMatrix:
    """Evolve ``rho`` for time ``t`` in steps no larger than ``dt``.

    ``hamiltonian`` is in energy units matching ``hbar`` (pass ``hbar=1`` for
    a Hamiltonian already divided by hbar); ``None`` means H = 0.
    ``observer(t, rho)`` is called on the initial state and after every step.
    """
    if t < 0 or dt <= 0:
        raise ValueError("need t >= 0 and dt > 0")
    n = max(1, int(math.ceil(t / dt - 1e-12))) if t > 0 else 0
    h = t / n if n else 0.0
    decay = np.exp(-decoherence_matrix(system, params) * h)
    U = None
    if hamiltonian is not None and np.any(hamiltonian):
        H = np.asarray(hamiltonian, dtype=complex)
        evals, evecs = np.linalg.eigh(H)
        U = (evecs * np.exp(-1j * evals * h / hbar)) @ evecs.conj().T
    data = np.array(rho.data, dtype=complex)
    state = DensityMatrix(data, system)
    if observer is not None:
        observer(0.0, state)
    for k in range(n):
        if U is not None:
            data = U @ data @ U.conj().T
        data = data * decay
        data = 0.5 * (data + data.conj().T)
        state = DensityMatrix(data, system)
        if check_every and (k + 1) % check_every == 0:
            state.check()
        if observer is not None:
            observer((k + 1) * h, state)
    return state


def off_diagonal_decay_rate(N: int, g: float, separation: float, params: CslParams,
                            clump_offsets=None) -> float:
    """Decay rate of <1|rho|2> for two rigidly displaced N-particle clumps.

    ``clump_offsets`` gives the particle positions within a clump (shape
    (N,) or (N, d)); the second clump is the first shifted by ``separation``
    along the first axis.  Defaults to point-like clumps.
    """
    if clump_offsets is None:
        offsets = np.zeros((N, 1))
    else:
        offsets = np.asarray(clump_offsets, dtype=float).reshape(N, -1)
    shift = np.zeros(offsets.shape[1])
    shift[0] = separation
    a = params.a
    same = _phi_vec(offsets[:, None, :] - offsets[None, :, :], a).sum()
    cross = _phi_vec(offsets[:, None, :] - (offsets + shift)[None, :, :], a).sum()
    return 0.5 * params.lambda_ * g * g * (2.0 * same - 2.0 * cross)


@dataclass(frozen=True)
class EnergyRateReport:
    total_rate: float
    cm_rate: float
    internal_rate: float


def _as_counts(particles) -> list[tuple[ParticleSpecies, float]]:
    if isinstance(particles, Mapping):
        items = list(particles.items())
    else:
        items = list(particles)
    out = []
    for sp, count in items:
        if count < 0:
            raise ValueError("particle counts must be non-negative")
        out.append((sp, float(count)))
    return out


def mean_energy_rate(particles, params: CslParams, *, hbar: float = const.HBAR,
                     dim: int = 3, energy_unit: float = const.EV) -> float:
    """Mean total energy gain d<H>/dt = (d lambda/2) sum_j g_j^2 hbar^2 / (2 M_j a^2).

    ``particles`` is a mapping or iterable of ``(ParticleSpecies, count)``.
    With the CGS defaults the result is in eV/s; ``dim`` is the number of
    spatial dimensions (3 for physical matter).
    """
    total = 0.0
    for sp, count in _as_counts(particles):
        g = params.coupling(sp)
        total += count * g * g / sp.mass
    return dim * params.lambda_ / 2.0 * hbar**2 / (2.0 * params.a**2) * total / energy_unit


def internal_rate_leading_order(particles, params: CslParams, *, hbar: float = const.HBAR,
                                dim: int = 3, energy_unit: float = const.EV) -> float:
    """Internal excitation rate to order a^-2: total minus the leading centre-of-mass term.

    Proportional to sum_j g_j^2/M_j - (sum_j g_j)^2 / M, written in the
    manifestly non-negative pairwise form so that mass-proportional
    couplings cancel to rounding.
    """
    items = _as_counts(particles)
    g = np.array([params.coupling(sp) for sp, _ in items])
    m = np.array([sp.mass for sp, _ in items])
    n = np.array([c for _, c in items])
    M = float(np.sum(n * m))
    if M == 0:
        return 0.0
    pair = (g[:, None] * np.sqrt(m[None, :] / m[:, None]) - g[None, :] * np.sqrt(m[:, None] / m[None, :])) ** 2
    bracket = float(np.sum(n[:, None] * n[None, :] * pair)) / (2.0 * M)
    return dim * params.lambda_ * hbar**2 / (4.0 * params.a**2) * bracket / energy_unit


def cm_energy_rate(rho: DensityMatrix, params: CslParams, *, hbar: float = const.HBAR,
                   dim: int = 3, energy_unit: float = const.EV) -> float:
    """Centre-of-mass energy gain from the full trace expression.

    (d lambda hbar^2 / 4 a^2 M) sum_jk g_j g_k Tr{[1 - r_jk^2/(2 d a^2)] exp(-r_jk^2/4a^2) rho}
    with r_jk the separation of particles j and k in each configuration.
    All configurations must carry the same particle content.
    """
    system = rho.system
    if system is None:
        raise ConfigurationError("density matrix has no attached system")
    owner, positions, g, m = system.particle_table(params)
    probs = np.real(np.diag(rho.data))
    a2 = params.a**2
    acc = 0.0
    M = None
    for b in range(system.n_basis):
        sel = owner == b
        if not np.any(sel):
            continue
        x, gb, mb = positions[sel], g[sel], m[sel]
        Mb = float(mb.sum())
        if M is None:
            M = Mb
        elif not math.isclose(M, Mb, rel_tol=1e-12):
            raise ConfigurationError("configurations carry different total masses")
        r2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
        f = (1.0 - r2 / (2.0 * dim * a2)) * np.exp(-r2 / (4.0 * a2))
        acc += probs[b] * float(gb @ f @ gb)
    if M is None:
        return 0.0
    return dim * params.lambda_ * hbar**2 / (4.0 * a2 * M) * acc / energy_unit


def energy_rate_report(rho: DensityMatrix, params: CslParams, **kw) -> EnergyRateReport:
    """Total, centre-of-mass and internal (= total - cm) gain for the particles in ``rho``."""
    system = rho.system
    if system is None:
        raise ConfigurationError("density matrix has no attached system")
    counts: dict[ParticleSpecies, float] = {}
    for name, _ in system.particle_assignments[0]:
        sp = system.species[name]
        counts[sp] = counts.get(sp, 0.0) + 1.0
    total = mean_energy_rate(counts, params, **kw)
    cm = cm_energy_rate(rho, params, **kw)
    return EnergyRateReport(total, cm, total - cm)


def lattice_hamiltonian(system: LatticeSystem, mass: float, hbar: float = 1.0,
                        potential: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Finite-difference Hamiltonian for a single particle on a uniform 1-D line system."""
    if system.dim != 1:
        raise ConfigurationError("lattice_hamiltonian supports 1-D line systems only")
    cells = [conf[0][1] for conf in system.particle_assignments if len(conf) == 1]
    if len(cells) != system.n_basis:
        raise ConfigurationError("lattice_hamiltonian needs exactly one particle per configuration")
    x = system.cell_positions[cells, 0]
    h = system.cell_size
    if not np.allclose(np.diff(x), h, rtol=1e-9):
        raise ConfigurationError("basis must be consecutive cells of a uniform line")
    n = x.size
    t = hbar**2 / (2.0 * mass * h * h)
    H = np.diag(np.full(n, 2.0 * t)) - t * (np.eye(n, k=1) + np.eye(n, k=-1))
    if potential is not None:
        H = H + np.diag(potential(x))
    return H


def energy_slope(rho: DensityMatrix, hamiltonian, system: LatticeSystem, params: CslParams,
                 window: float, dt: float, hbar: float = 1.0) -> float:
    """Finite-difference d<H>/dt of the evolved state over ``window``."""
    H = np.asarray(hamiltonian)
    e0 = rho.expectation(H)
    rho_t = evolve_density(rho, H, system, params, window, dt, hbar=hbar, check_every=0)
    rho_t.check()
    return (rho_t.expectation(H) - e0) / window


def observable_series(rho: DensityMatrix, hamiltonian, system: LatticeSystem, params: CslParams,
                      t: float, dt: float, hbar: float = 1.0,
                      coherence: tuple[int, int] | None = (0, 1), record_every: int = 1):
    """Time series of traced observables as (t, observable, value) rows."""
    rows = []
    H = None if hamiltonian is None else np.asarray(hamiltonian)
    counter = {"n": 0}

    def observe(time, state):
        if counter["n"] % record_every == 0:
            if coherence is not None:
                i, j = coherence
                rows.append((time, f"abs_rho_{i}_{j}", float(abs(state.data[i, j]))))
            if H is not None:
                rows.append((time, "mean_H", state.expectation(H)))
        counter["n"] += 1

    evolve_density(rho, H, system, params, t, dt, hbar=hbar, observer=observe)
    return rows


def measured_decay_rate(system: LatticeSystem, params: CslParams, t: float, steps: int = 50,
                        pair: tuple[int, int] = (0, 1)) -> float:
    """Fit log|rho_ij(t)| against t for an equal superposition with H = 0."""
    n = system.n_basis
    amp = np.zeros(n, dtype=complex)
    amp[list(pair)] = 1.0
    rows = observable_series(DensityMatrix.pure(amp, system), None, system, params, t, t / steps,
                             coherence=pair)
    times = np.array([r[0] for r in rows])
    vals = np.array([r[2] for r in rows])
    slope = np.polyfit(times, np.log(vals), 1)[0]
    return -slope
