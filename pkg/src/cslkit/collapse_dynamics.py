"""Stochastic statevector evolution under the CSL modified Schrodinger equation.

The noise field ``w(x, t)`` lives on the lattice cells.  Writing
``C[b, k] = A_b(x_k) * sqrt(lambda * cell_measure)`` for the collapse
coupling of basis state ``b`` to cell ``k`` and ``xi`` for standard normal
per-cell, per-step draws, one step of the linear equation multiplies the
amplitude of basis state ``b`` by

    exp(sqrt(dt) * xi . C[b] - dt * |C[b]|^2)

which is the exact solution of the collapse part over ``dt`` (the smeared
number operator is diagonal in the configuration basis).  The Hamiltonian
part is applied first as an exact unitary ``exp(-i H dt)``.

Two sampling modes are provided:

``"raw"``
    ``xi`` is zero-mean Gaussian.  The squared norm of the unnormalized
    state is accumulated as the trajectory weight; ensemble averages must
    be weighted by it (probability rule ``P(w) = <psi|psi>``).
``"physical"``
    ``xi`` is drawn from the physical law of the field, i.e. the raw
    Gaussian reweighted by the norm growth over the step.  For a diagonal
    collapse factor that law is the Gaussian mixture
    ``sum_b p_b N(2 sqrt(dt) C[b], 1)`` with ``p_b = |psi_b|^2``, whose mean
    is ``2 sqrt(dt) <C>`` (the "2 lambda <A>" drift).  Weights stay 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .lattice import LatticeSystem
from .params import ConfigurationError, CslParams, StepSizeError

COLLAPSE_THRESHOLD = 1.0 - 1e-4
MAX_NORM_GROWTH = 1e6
MODES = ("physical", "raw")


@dataclass(frozen=True, eq=False)
class SmearedNumberOperator:
    """Diagonal of A(x) over the configuration basis.

    ``values[b, k]`` is the eigenvalue of A(x_k) on basis state ``b``.
    """

    values: np.ndarray
    cell_measure: float

    @property
    def n_basis(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    def collapse_couplings(self, params: CslParams) -> np.ndarray:
        return self.values * math.sqrt(params.lambda_ * self.cell_measure)


@dataclass
class WaveState:
    amplitudes: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    @classmethod
    def normalized(cls, amplitudes, weight: float = 1.0) -> "WaveState":
        amp = np.asarray(amplitudes, dtype=complex)
        norm = np.linalg.norm(amp)
        if norm == 0:
            raise ValueError("cannot normalize a zero state")
        return cls(amp / norm, weight)

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass(frozen=True, eq=False)
class NoiseSample:
    """Per-step standard normal draws for every cell plus one uniform per step.

    The uniforms select the mixture component in ``"physical"`` mode and are
    ignored in ``"raw"`` mode.
    """

    increments: np.ndarray  # (steps, n_cells)
    selectors: np.ndarray  # (steps,)
    dt: float
    seed: int
    index: int = 0

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @classmethod
    def draw(cls, n_cells: int, steps: int, dt: float, seed: int, index: int = 0) -> "NoiseSample":
        rng = trajectory_rng(seed, index)
        xi = rng.standard_normal((steps, n_cells))
        u = rng.random(steps)
        return cls(xi, u, dt, seed, index)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _cell_averaged_gaussian(x: np.ndarray, centers: np.ndarray, h: float, a: float) -> np.ndarray:
    """Mean of exp(-(x - z)^2 / 2a^2) over cubic cells of edge h centred at ``centers``.

    x: (n_eval, d), centers: (n_src, d) -> (n_src, n_eval)
    """
    diff = x[None, :, :] - centers[:, None, :]
    s = math.sqrt(2.0) * a
    per_axis = (math.sqrt(math.pi / 2.0) * a / h) * (erf((diff + h / 2) / s) - erf((diff - h / 2) / s))
    return np.prod(per_axis, axis=2)


def build_smeared_number_operator(system: LatticeSystem, params: CslParams) -> SmearedNumberOperator:
    """Evaluate A(x_k) on every basis configuration at every cell centre x_k.

    Each particle contributes ``g (pi a^2)^(-d/4)`` times the Gaussian
    averaged over its occupied cell.  The ``d/4`` exponent (3/4 in three
    dimensions) keeps the one-particle collapse rate equal to ``lambda g^2``
    on 1-D and 2-D lattices as well.
    """
    if system.cell_size > params.a:
        raise ConfigurationError(
            f"cell size {system.cell_size:g} exceeds smearing length a={params.a:g}; "
            "the Gaussian window is not resolved"
        )
    owner, positions, g, _ = system.particle_table(params)
    values = np.zeros((system.n_basis, system.n_cells))
    if owner.size:
        norm = (math.pi * params.a**2) ** (-system.dim / 4.0)
        kernel = _cell_averaged_gaussian(system.cell_positions, positions, system.cell_size, params.a)
        np.add.at(values, owner, norm * g[:, None] * kernel)
    values.setflags(write=False)
    return SmearedNumberOperator(values, system.cell_measure)


def _unitary(hamiltonian, dt: float):
    if hamiltonian is None:
        return None
    h = np.asarray(hamiltonian, dtype=complex)
    if not np.any(h):
        return None
    if not np.allclose(h, h.conj().T, atol=1e-12 * max(1.0, np.abs(h).max())):
        raise ConfigurationError("Hamiltonian must be Hermitian")
    evals, evecs = np.linalg.eigh(h)
    return (evecs * np.exp(-1j * evals * dt)) @ evecs.conj().T


class _Stepper:
    """Vectorized stepping of a batch of trajectories, shape (n_traj, n_basis)."""

    def __init__(self, couplings: np.ndarray, unitary, dt: float, mode: str):
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        self.C = np.asarray(couplings, dtype=float)
        self.c2 = np.sum(self.C**2, axis=1)
        self.U = unitary
        self.dt = dt
        self.sqdt = math.sqrt(dt)
        self.physical = mode == "physical"
        if dt * self.c2.max(initial=0.0) > 0.5:
            warnings.warn("dt * lambda * A^2 is not small; collapse steps are coarse", stacklevel=3)

    def step(self, psi, logw, xi, u):
        if self.U is not None:
            psi = psi @ self.U.T
        if self.physical:
            p = psi.real**2 + psi.imag**2
            cdf = np.cumsum(p, axis=1)
            pick = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), psi.shape[1] - 1)
            xi = xi + 2.0 * self.sqdt * self.C[pick]
        expo = self.sqdt * (xi @ self.C.T) - self.dt * self.c2
        shift = expo.max(axis=1, keepdims=True)
        psi = psi * np.exp(expo - shift)
        n2 = np.sum(psi.real**2 + psi.imag**2, axis=1)
        growth = np.log(n2) + 2.0 * shift[:, 0]
        if not np.all(np.isfinite(growth)) or np.any(growth > 2.0 * math.log(MAX_NORM_GROWTH)):
            raise StepSizeError("trajectory norm blew up; reduce dt")
        psi = psi / np.sqrt(n2)[:, None]
        if not self.physical:
            logw = logw + growth
        return psi, logw


def evolve_trajectory(state: WaveState, hamiltonian, A: SmearedNumberOperator, params: CslParams,
                      noise: NoiseSample, steps: int | None = None,
                      mode: str = "physical") -> list[WaveState]:
    """Integrate one trajectory; returns the initial state followed by one state per step.

    ``hamiltonian`` is a dense Hermitian matrix in angular-frequency units
    (H / hbar, s^-1), or ``None`` for pure collapse dynamics.
    """
    steps = noise.steps if steps is None else steps
    if steps > noise.steps:
        raise ValueError("noise sample shorter than requested number of steps")
    if noise.increments.shape[1] != A.n_cells:
        raise ValueError("noise sample and operator disagree on the number of cells")
    if state.amplitudes.shape != (A.n_basis,):
        raise ValueError("state and operator disagree on the basis size")
    stepper = _Stepper(A.collapse_couplings(params), _unitary(hamiltonian, noise.dt), noise.dt, mode)

    norm = np.linalg.norm(state.amplitudes)
    psi = (state.amplitudes / norm)[None, :]
    logw = np.array([math.log(state.weight * norm**2)]) if state.weight > 0 else np.array([-np.inf])
    out = [WaveState(psi[0].copy(), float(np.exp(logw[0])))]
    for n in range(steps):
        psi, logw = stepper.step(psi, logw, noise.increments[n][None, :], noise.selectors[n:n + 1])
        out.append(WaveState(psi[0].copy(), float(np.exp(logw[0]))))
    return out


@dataclass
class EnsembleResult:
    """Per-trajectory summary of an ensemble run.

    ``outcomes[i]`` is the basis index trajectory ``i`` collapsed onto at the
    horizon, or -1 when no basis probability exceeded the threshold.
    ``steps_to_collapse[i]`` is the first step after which that outcome stayed
    above threshold (-1 if uncollapsed).
    """

    outcomes: np.ndarray
    steps_to_collapse: np.ndarray
    weights: np.ndarray
    final_probabilities: np.ndarray
    dt: float
    seed: int
    mode: str

    @property
    def n_trajectories(self) -> int:
        return self.outcomes.size

    def rows(self):
        for i in range(self.n_trajectories):
            yield i, int(self.outcomes[i]), int(self.steps_to_collapse[i]), float(self.weights[i])


def run_ensemble(initial: WaveState, hamiltonian, A: SmearedNumberOperator, params: CslParams,
                 dt: float, steps: int, n_trajectories: int, seed: int,
                 mode: str = "physical", threshold: float = COLLAPSE_THRESHOLD,
                 couplings: np.ndarray | None = None) -> EnsembleResult:
    """Run ``n_trajectories`` independent trajectories.

    Trajectory ``i`` draws its noise from ``trajectory_rng(seed, i)`` so the
    result does not depend on batching.  ``couplings`` overrides the
    per-cell collapse couplings derived from ``A`` (used for reduced models).
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    C = A.collapse_couplings(params) if couplings is None else np.asarray(couplings, dtype=float)
    n_basis, n_cells = C.shape
    stepper = _Stepper(C, _unitary(hamiltonian, dt), dt, mode)

    amp0 = np.asarray(initial.amplitudes, dtype=complex)
    norm0 = np.linalg.norm(amp0)
    psi0 = amp0 / norm0
    logw0 = math.log(initial.weight * norm0**2) if initial.weight > 0 else -np.inf

    outcomes = np.full(n_trajectories, -1, dtype=int)
    first_step = np.full(n_trajectories, -1, dtype=int)
    logw_all = np.empty(n_trajectories)
    final_p = np.empty((n_trajectories, n_basis))

    block = int(max(1, min(512, 4_000_000 // max(1, steps * (n_cells + 1)))))
    for start in range(0, n_trajectories, block):
        idx = np.arange(start, min(start + block, n_trajectories))
        xi = np.empty((idx.size, steps, n_cells))
        u = np.empty((idx.size, steps))
        for j, i in enumerate(idx):
            rng = trajectory_rng(seed, int(i))
            xi[j] = rng.standard_normal((steps, n_cells))
            u[j] = rng.random(steps)
        psi = np.repeat(psi0[None, :], idx.size, axis=0)
        logw = np.full(idx.size, logw0)
        # last step at which each trajectory was NOT collapsed onto its current leader
        last_open = np.zeros(idx.size, dtype=int)
        leader = np.argmax(np.abs(psi) ** 2, axis=1)
        for n in range(steps):
            psi, logw = stepper.step(psi, logw, xi[:, n, :], u[:, n])
            p = psi.real**2 + psi.imag**2
            lead = np.argmax(p, axis=1)
            closed = p[np.arange(idx.size), lead] > threshold
            reopen = ~closed | (lead != leader)
            last_open[reopen] = n + 1
            leader = lead
        p = psi.real**2 + psi.imag**2
        lead = np.argmax(p, axis=1)
        done = p[np.arange(idx.size), lead] > threshold
        outcomes[idx] = np.where(done, lead, -1)
        first_step[idx] = np.where(done, last_open, -1)
        logw_all[idx] = logw
        final_p[idx] = p

    return EnsembleResult(outcomes, first_step, np.exp(logw_all), final_p, dt, seed, mode)


@dataclass
class OutcomeStatistics:
    """Weighted outcome frequencies over the collapsed trajectories.

    ``frequencies`` sum to 1 over collapsed trajectories; ``uncertainties``
    are binomial standard errors using the effective sample size of the
    weights.  Uncollapsed trajectories are counted in ``n_uncollapsed`` and
    never enter the frequencies.
    """

    frequencies: np.ndarray
    uncertainties: np.ndarray
    n_collapsed: int
    n_uncollapsed: int
    uncollapsed_weight_fraction: float
    effective_n: float
    ensemble: EnsembleResult = field(repr=False)

    def born_band(self, targets, n_sigma: float = 3.0) -> np.ndarray:
        t = np.asarray(targets, dtype=float)
        return n_sigma * np.sqrt(t * (1 - t) / self.effective_n)


def two_outcome_couplings(collapse_rate_gap: float) -> np.ndarray:
    """Single-channel couplings (+k, -k) whose off-diagonal decay rate is ``collapse_rate_gap``."""
    k = math.sqrt(collapse_rate_gap / 2.0)
    return np.array([[k], [-k]])


def weighted_frequencies(result: EnsembleResult, n_outcomes: int):
    w = result.weights
    collapsed = result.outcomes >= 0
    wc = w[collapsed]
    total = wc.sum()
    freq = np.array([w[result.outcomes == i].sum() for i in range(n_outcomes)])
    freq = freq / total if total > 0 else np.full(n_outcomes, np.nan)
    n_eff = total**2 / np.sum(wc**2) if total > 0 else 0.0
    sigma = np.sqrt(freq * (1 - freq) / n_eff) if n_eff > 0 else np.full(n_outcomes, np.nan)
    unc_frac = w[~collapsed].sum() / w.sum() if w.sum() > 0 else 0.0
    return freq, sigma, int(collapsed.sum()), int((~collapsed).sum()), float(unc_frac), float(n_eff)


def sample_outcome_statistics(initial_amplitudes, collapse_rate_gap: float, n_trajectories: int,
                              horizon: float, seed: int, dt: float | None = None,
                              mode: str = "physical") -> OutcomeStatistics:
    """Collapse statistics of a two-outcome superposition ``a1|1> + a2|2>``.

    The two states couple to the noise with opposite sign so that their
    coherence decays at ``collapse_rate_gap`` (s^-1).  With H = 0 this is the
    gambler's-ruin reduction of the full lattice problem.
    """
    if n_trajectories < 100:
        raise ValueError("n_trajectories must be >= 100")
    if collapse_rate_gap <= 0:
        raise ValueError("collapse_rate_gap must be positive")
    if horizon * collapse_rate_gap < 5:
        warnings.warn("horizon is short compared with the collapse time", stacklevel=2)
    dt = 0.01 / collapse_rate_gap if dt is None else dt
    steps = int(math.ceil(horizon / dt))
    C = two_outcome_couplings(collapse_rate_gap)
    dummy = SmearedNumberOperator(np.zeros((2, 1)), 1.0)
    res = run_ensemble(WaveState.normalized(initial_amplitudes), None, dummy, CslParams(),
                       dt, steps, n_trajectories, seed, mode=mode, couplings=C)
    freq, sigma, n_c, n_u, unc, n_eff = weighted_frequencies(res, 2)
    return OutcomeStatistics(freq, sigma, n_c, n_u, unc, n_eff, res)
