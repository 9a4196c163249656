"""Binned spectrum fitting and profile-chi2 signal limits.

Expected counts per bin are

    mu_i = background_i(b) + sum_p A_p G_p,i + s T_i

where the background is a quadratic in (E - E_ref) integrated over the bin,
G_p,i is a unit-area Gaussian peak of the detector resolution integrated
over the bin, and T_i is the signal template folded with the resolution
(times exposure for a rate template).  Everything except the signal
multiplier enters linearly, so every profile point is a linear
least-squares problem in the nuisance parameters.

Two statistics are supported:

``"pearson"``
    sum (n - mu)^2 / v with v = max(mu_hat, 1); the variances are iterated to
    self-consistency at the free best fit and then held fixed for the
    profile, which makes each profile point an exact weighted least-squares
    solve.
``"poisson"``
    the likelihood-ratio deviance 2 sum [mu - n + n ln(n/mu)], for low-count
    windows; nuisance parameters are re-minimized subject to mu >= 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, lsq_linear, minimize
from scipy.special import ndtr
from scipy.stats import chi2 as chi2_dist

# Cu, Zn, Ga K-alpha
XRAY_PEAKS_KEV = {"Cu": 8.05, "Zn": 8.64, "Ga": 9.25}
COSME_WINDOW = (5.0, 17.0)
COSME_BIN_WIDTH = 0.1
COSME_EXPOSURE = 85.24
COSME_RESOLUTION = 0.18
NUCLEAR_HALF_WINDOW = 25.0

STATISTICS = ("pearson", "poisson")


class FitError(RuntimeError):
    """A fit or limit could not be produced."""


class SingularDesignError(FitError):
    """Model components are degenerate over the fitted bins."""


class ModelError(ValueError):
    """Model predicts a negative expectation."""


def delta_chi2(confidence: float) -> float:
    """Profile threshold for a one-parameter limit: 1.0 at 68%, 3.84 at 95%."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if abs(confidence - 0.68) < 0.005:
        return 1.0
    if abs(confidence - 0.95) < 1e-9:
        return 3.84
    return float(chi2_dist.ppf(confidence, 1))


# -- data -------------------------------------------------------------------------

@dataclass(eq=False)
class Spectrum:
    bin_edges: np.ndarray  # keV
    counts: np.ndarray
    exposure: float  # kg days
    resolution_sigma: float  # keV

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.bin_edges.ndim != 1 or self.bin_edges.size < 2:
            raise ValueError("need at least two bin edges")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if self.counts.shape != (self.bin_edges.size - 1,):
            raise ValueError("len(counts) must equal len(bin_edges) - 1")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite and non-negative")
        if not self.exposure > 0:
            raise ValueError("exposure must be positive")
        if not self.resolution_sigma > 0:
            raise ValueError("resolution sigma must be positive")

    @property
    def lo(self) -> np.ndarray:
        return self.bin_edges[:-1]

    @property
    def hi(self) -> np.ndarray:
        return self.bin_edges[1:]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def window(self, e_min: float, e_max: float) -> "Spectrum":
        keep = (self.lo >= e_min - 1e-9) & (self.hi <= e_max + 1e-9)
        if not np.any(keep):
            raise ValueError("fit window contains no bins")
        idx = np.flatnonzero(keep)
        edges = self.bin_edges[idx[0]: idx[-1] + 2]
        return Spectrum(edges, self.counts[idx], self.exposure, self.resolution_sigma)


def uniform_edges(e_min: float, e_max: float, width: float) -> np.ndarray:
    n = int(round((e_max - e_min) / width))
    return e_min + width * np.arange(n + 1)


@dataclass
class SpectralModel:
    """Background + known peaks + signal.

    background: (b0, b1, b2) in counts/keV for the polynomial in
    (E - reference_energy); reference_energy defaults to the middle of the
    fitted range.  peaks: (center keV, amplitude counts).  A signal is either
    ``signal_template`` = (E grid keV, rate counts/keV/kg/day), scaled by
    exposure and by ``signal_amplitude``, or ``signal_line`` = centre of a
    resolution-width line whose amplitude is in counts.
    """

    background: tuple = (0.0, 0.0, 0.0)
    peaks: tuple = ()
    signal_template: tuple | None = None
    signal_amplitude: float = 0.0
    signal_line: float | None = None
    reference_energy: float | None = None

    def __post_init__(self):
        if self.signal_template is not None and self.signal_line is not None:
            raise ValueError("use either a signal template or a signal line, not both")
        self.background = tuple(float(b) for b in self.background) + (0.0,) * (3 - len(self.background))
        self.peaks = tuple((float(c), float(a)) for c, a in self.peaks)

    @property
    def has_signal(self) -> bool:
        return self.signal_template is not None or self.signal_line is not None

    def with_peaks_at(self, centers) -> "SpectralModel":
        return SpectralModel(self.background, tuple((c, 0.0) for c in centers), self.signal_template,
                             self.signal_amplitude, self.signal_line, self.reference_energy)


# -- resolution folding ---------------------------------------------------------------

def _trapezoid_weights(E: np.ndarray) -> np.ndarray:
    w = np.zeros_like(E)
    d = np.diff(E)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def fold_resolution(template, sigma: float, bin_edges) -> np.ndarray:
    """Convolve a sampled curve with a unit-area Gaussian and integrate over each bin.

    ``template`` is ``(E, values)`` with values per keV; the curve is taken
    as piecewise linear between samples (a repeated abscissa encodes a step).
    Returns the per-bin integral in the template's units times keV.
    """
    E, f = (np.asarray(x, dtype=float) for x in template)
    edges = np.asarray(bin_edges, dtype=float)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if E.ndim != 1 or E.shape != f.shape or np.any(np.diff(E) < 0):
        raise ValueError("template must be two equal-length arrays with non-decreasing energies")
    step = np.diff(E)
    if np.any(step > sigma / 5 + 1e-12) and sigma >= 1e-2:
        warnings.warn("template grid is coarse relative to sigma (step > sigma/5)", stacklevel=2)
    pad = 6.0 * sigma
    if (f[0] != 0 and E[0] > edges[0] - pad) or (f[-1] != 0 and E[-1] < edges[-1] + pad):
        warnings.warn("template support ends within 6 sigma of the bin range; edge bins are truncated",
                      stacklevel=2)
    w = _trapezoid_weights(E) * f
    cdf = ndtr((edges[:, None] - E[None, :]) / sigma)
    return (cdf[1:] - cdf[:-1]) @ w


def binned_line(center: float, sigma: float, bin_edges) -> np.ndarray:
    """Unit-area Gaussian line integrated over each bin."""
    edges = np.asarray(bin_edges, dtype=float)
    cdf = ndtr((edges - center) / sigma)
    return np.diff(cdf)


def _background_columns(edges: np.ndarray, ref: float) -> np.ndarray:
    u = edges - ref
    return np.stack([np.diff(u), np.diff(u**2) / 2.0, np.diff(u**3) / 3.0], axis=1)


def _signal_column(model: SpectralModel, edges: np.ndarray, exposure: float, sigma: float) -> np.ndarray:
    if model.signal_template is not None:
        return fold_resolution(model.signal_template, sigma, edges) * exposure
    if model.signal_line is not None:
        return binned_line(model.signal_line, sigma, edges)
    return np.zeros(edges.size - 1)


def expected_counts(model: SpectralModel, bin_edges, exposure: float, sigma: float) -> np.ndarray:
    """Per-bin expectation of ``model``."""
    edges = np.asarray(bin_edges, dtype=float)
    ref = model.reference_energy if model.reference_energy is not None else 0.5 * (edges[0] + edges[-1])
    mu = _background_columns(edges, ref) @ np.asarray(model.background)
    for center, amp in model.peaks:
        mu = mu + amp * binned_line(center, sigma, edges)
    if model.has_signal and model.signal_amplitude:
        mu = mu + model.signal_amplitude * _signal_column(model, edges, exposure, sigma)
    return mu


def synth_spectrum(model: SpectralModel, exposure: float, bin_edges, seed: int,
                   resolution_sigma: float = COSME_RESOLUTION) -> Spectrum:
    """Poisson-sample every bin of ``model``; identical seeds give identical spectra."""
    mu = expected_counts(model, bin_edges, exposure, resolution_sigma)
    if np.any(mu < 0):
        bad = int(np.flatnonzero(mu < 0)[0])
        raise ModelError(f"negative expectation {mu[bad]:.4g} in bin {bad}")
    rng = np.random.default_rng(seed)
    return Spectrum(bin_edges, rng.poisson(mu).astype(float), exposure, resolution_sigma)


# -- profile likelihood -------------------------------------------------------------

class SignalProfile:
    """Profiled fit statistic as a function of the signal multiplier ``s``."""

    def __init__(self, data: Spectrum, model: SpectralModel, fit_window=None,
                 statistic: str = "pearson", max_iter: int = 100, background_only: bool = False):
        if statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if not model.has_signal and not background_only:
            raise ValueError("model has no signal component to profile")
        self.has_signal = model.has_signal
        sp = data.window(*fit_window) if fit_window is not None else data
        self.data = sp
        self.model = model
        self.statistic = statistic
        edges = sp.bin_edges
        self.reference_energy = (model.reference_energy if model.reference_energy is not None
                                 else 0.5 * (edges[0] + edges[-1]))
        sigma = sp.resolution_sigma
        cols = [_background_columns(edges, self.reference_energy)]
        if model.peaks:
            cols.append(np.stack([binned_line(c, sigma, edges) for c, _ in model.peaks], axis=1))
        self.X = np.concatenate(cols, axis=1)
        self.n_background = 3
        self.T = _signal_column(model, edges, sp.exposure, sigma)
        self.y = sp.counts
        n_free = self.X.shape[1] + int(self.has_signal)
        if self.y.size < n_free + 10:
            raise ValueError(f"{self.y.size} bins is too few for {n_free} free parameters")
        self.lower = np.r_[np.full(self.n_background, -np.inf), np.zeros(self.X.shape[1] - self.n_background)]
        self._check_design()
        self.max_iter = max_iter
        self._cache: dict[float, tuple[float, np.ndarray]] = {}
        self._fit_free()

    # design sanity -------------------------------------------------------------
    def _design(self):
        return np.column_stack([self.X, self.T]) if self.has_signal else self.X

    def _check_design(self):
        A = self._design()
        scale = np.linalg.norm(A, axis=0)
        if np.any(scale == 0):
            raise SingularDesignError("a model component vanishes over the fitted bins")
        sv = np.linalg.svd(A / scale, compute_uv=False)
        if sv[-1] < 1e-9 * sv[0]:
            raise SingularDesignError("model components are degenerate (e.g. coincident peaks)")

    @property
    def dof(self) -> int:
        return self.y.size - self.X.shape[1] - int(self.has_signal)

    # Pearson -------------------------------------------------------------------
    def _wls(self, A, b, w, lower):
        sw = np.sqrt(w)
        Aw, bw = A * sw[:, None], b * sw
        c, *_ = np.linalg.lstsq(Aw, bw, rcond=None)
        if np.any(c < lower - 1e-12 * np.maximum(1, np.abs(c))):
            res = lsq_linear(Aw, bw, bounds=(lower, np.full_like(lower, np.inf)), method="bvls",
                             lsmr_tol="auto", tol=1e-12)
            c = res.x
        return c

    def _fit_free(self):
        A = self._design()
        lower = np.r_[self.lower, -np.inf] if self.has_signal else self.lower
        var = np.maximum(self.y, 1.0)
        prev = None
        for it in range(self.max_iter):
            c = self._wls(A, self.y, 1.0 / var, lower)
            mu = A @ c
            var = np.maximum(mu, 1.0)
            if prev is not None and np.allclose(c, prev, rtol=1e-10, atol=1e-12 * np.abs(c).max()):
                break
            prev = c
        else:
            raise FitError(f"variance iteration did not converge in {self.max_iter} iterations")
        self.weights = 1.0 / var
        self.iterations = it + 1
        w = self.weights
        cov = np.linalg.pinv((A * w[:, None]).T @ A)
        self.signal_error = float(math.sqrt(max(cov[-1, -1], 0.0))) if self.has_signal else 0.0
        if not self.has_signal:
            c = np.r_[c, 0.0]
        if self.statistic == "pearson":
            self.s_hat = float(c[-1])
            self.coeffs_hat = c[:-1]
            self.chi2_min = self._pearson(self.s_hat, c[:-1])
        else:
            self._fit_free_poisson(c)

    def _pearson(self, s, c) -> float:
        r = self.y - self.X @ c - s * self.T
        return float(np.sum(self.weights * r * r))

    # Poisson -------------------------------------------------------------------
    def _deviance(self, mu) -> float:
        y = self.y
        mu = np.maximum(mu, 1e-300)
        pos = y > 0
        return float(2.0 * (np.sum(mu - y) + np.sum(y[pos] * np.log(y[pos] / mu[pos]))))

    def _poisson_min(self, A, offset, start, lower):
        """Minimize the deviance over the columns of ``A`` with background >= 0 and mu >= 0 per bin."""
        y = self.y
        pos = y > 0
        floor = 1e-12
        scale = np.linalg.norm(A, axis=0)
        scale[scale == 0] = 1.0
        As = A / scale
        nb = self.n_background
        G = np.vstack([As[:, :nb] @ np.eye(nb, A.shape[1]), As])  # background rows, then mu rows
        h = np.r_[np.zeros(y.size), np.broadcast_to(offset, y.shape)]

        def fun(z):
            muc = np.maximum(As @ z + offset, floor)
            val = 2.0 * (np.sum(muc - y) + np.sum(y[pos] * np.log(y[pos] / muc[pos])))
            return val, 2.0 * As.T @ (1.0 - y / muc)

        cons = [{"type": "ineq", "fun": lambda z: G @ z + h, "jac": lambda z: G}]
        bounds = [(None if np.isinf(lo) else lo, None) for lo in lower]

        def feasible(z):
            z = np.array(z, dtype=float)
            z[nb:] = np.maximum(z[nb:], np.where(np.isinf(lower[nb:]), z[nb:], lower[nb:]))
            slack = G @ z + h
            if np.any(slack < floor):
                # lift the constant background term until every bin is feasible
                z[0] += np.max((floor - slack) / np.maximum(G[:, 0], 1e-300)) + 1e-9
            return z

        flat = np.zeros(A.shape[1])
        flat[0] = max(float(np.mean(y)), 1.0) / max(As[:, 0].mean(), 1e-300)
        best = None
        for z0 in (feasible(np.asarray(start, dtype=float) * scale), feasible(flat)):
            res = minimize(fun, z0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                           options={"maxiter": 1000, "ftol": 1e-13})
            if (res.success or res.status == 9) and np.all(G @ res.x + h > -1e-7):
                if best is None or res.fun < best.fun:
                    best = res
        if best is None:
            raise FitError(f"Poisson fit failed: {res.message}")
        c = best.x / scale
        return c, self._deviance(A @ c + offset)

    def _fit_free_poisson(self, start):
        if not self.has_signal:
            self.s_hat = 0.0
            self.coeffs_hat, self.chi2_min = self._profile(0.0)
            return
        A = self._design()
        lower = np.r_[self.lower, -np.inf]
        c, dev = self._poisson_min(A, 0.0, start, lower)
        self.s_hat = float(c[-1])
        self.coeffs_hat = c[:-1]
        self.chi2_min = dev
        # the constrained joint minimum can be refined by the profile solve at s_hat
        c2, dev2 = self._profile(self.s_hat)
        if dev2 < dev:
            self.coeffs_hat, self.chi2_min = c2, dev2

    # profile -------------------------------------------------------------------
    def _profile(self, s: float):
        if s in self._cache:
            return self._cache[s]
        if self.statistic == "pearson":
            c = self._wls(self.X, self.y - s * self.T, self.weights, self.lower)
            out = (c, self._pearson(s, c))
        else:
            start = self._wls(self.X, self.y - s * self.T, self.weights, self.lower)
            out = self._poisson_min(self.X, s * self.T, start, self.lower)
        self._cache[s] = out
        return out

    def chi2(self, s: float) -> float:
        return self._profile(float(s))[1]

    def nuisance(self, s: float) -> np.ndarray:
        return self._profile(float(s))[0]

    def delta(self, s: float) -> float:
        return self.chi2(s) - self.chi2_min

    def _scale(self) -> float:
        return self.signal_error if self.signal_error > 0 else 1.0

    def _crossing(self, start: float, target: float, direction: float) -> float:
        """First s beyond ``start`` (in ``direction``) where chi2(s) reaches ``target``."""
        f = lambda s: self.chi2(s) - target
        span = 5.0 * math.sqrt(max(target - self.chi2(start), 1.0)) * self._scale()
        for attempt in range(2):
            end = start + direction * span
            if f(end) >= 0:
                lo, hi = sorted((start, end))
                return float(brentq(f, lo, hi, xtol=1e-12 * max(1.0, abs(end)), rtol=1e-10))
            span *= 10.0
        raise FitError("profile does not reach the threshold inside the widened scan range")

    def upper_limit(self, confidence: float) -> float:
        """Upper limit on s >= 0 (profile referenced to the physical minimum)."""
        s_ref = max(self.s_hat, 0.0)
        target = self.chi2(s_ref) + delta_chi2(confidence)
        return self._crossing(s_ref, target, +1.0)

    def interval(self, confidence: float) -> tuple[float, float]:
        """Two-sided interval {s : chi2(s) - chi2_min <= threshold}, no physical bound."""
        target = self.chi2_min + delta_chi2(confidence)
        return (self._crossing(self.s_hat, target, -1.0), self._crossing(self.s_hat, target, +1.0))

    def scan(self, s_values) -> list[tuple[float, float]]:
        """(s, delta chi2) with delta referenced to the minimum over s >= 0."""
        ref = self.chi2(max(self.s_hat, 0.0))
        return [(float(s), self.chi2(s) - ref) for s in s_values]


@dataclass
class FitResult:
    parameters: dict
    chi_square: float
    dof: int
    profile: list = field(default_factory=list)
    upper_limits: dict = field(default_factory=dict)
    signal: float = 0.0
    signal_error: float = 0.0
    statistic: str = "pearson"
    reference_energy: float = 0.0

    def report(self, signal_name: str = "s") -> str:
        lines = [
            f"statistic: {self.statistic}",
            f"chi_square: {self.chi_square:.6g}",
            f"dof: {self.dof}",
            f"best_fit_{signal_name}: {self.signal:.6g} +/- {self.signal_error:.3g}",
            f"background_reference_energy_keV: {self.reference_energy:.6g}",
        ]
        for name, value in self.parameters.items():
            lines.append(f"{name}: {value:.6g}")
        for cl, lim in sorted(self.upper_limits.items()):
            lines.append(f"upper_limit_{signal_name}_{100 * cl:g}pct: {lim:.6g}")
        return "\n".join(lines)


def _result_from_profile(prof: SignalProfile, confidences, scan_points: int) -> FitResult:
    names = ["background_b0_per_keV", "background_b1_per_keV2", "background_b2_per_keV3"]
    names += [f"peak_{c:g}keV_counts" for c, _ in prof.model.peaks]
    params = dict(zip(names, (float(v) for v in prof.coeffs_hat)))
    limits = {cl: prof.upper_limit(cl) for cl in confidences}
    profile = []
    if scan_points and limits:
        s_max = 1.5 * max(limits.values())
        profile = prof.scan(np.linspace(0.0, s_max, scan_points))
    return FitResult(params, max(prof.chi2_min, 0.0), prof.dof, profile, limits,
                     prof.s_hat, prof.signal_error, prof.statistic, prof.reference_energy)



def fit_spectrum(data: Spectrum, model: SpectralModel, fit_window=None, statistic: str = "pearson",
                 confidences=(0.68, 0.95), scan_points: int = 41) -> FitResult:
    """Best fit of background, peak amplitudes and signal multiplier, plus limits and a profile scan.

    Without a signal component only the nuisance fit is returned.
    """
    if not model.has_signal:
        prof = SignalProfile(data, model, fit_window, statistic, background_only=True)
        names = ["background_b0_per_keV", "background_b1_per_keV2", "background_b2_per_keV3"]
        names += [f"peak_{c:g}keV_counts" for c, _ in model.peaks]
        return FitResult(dict(zip(names, map(float, prof.coeffs_hat))), max(prof.chi2_min, 0.0),
                         prof.dof, statistic=statistic, reference_energy=prof.reference_energy)
    prof = SignalProfile(data, model, fit_window, statistic)
    return _result_from_profile(prof, confidences, scan_points)


def signal_upper_limit(data: Spectrum, model: SpectralModel, confidence: float, fit_window=None,
                       statistic: str = "pearson") -> float:
    """Upper limit on the multiple of the signal template at ``confidence``."""
    return SignalProfile(data, model, fit_window, statistic).upper_limit(confidence)


def line_model(center: float, half_width: float = NUCLEAR_HALF_WINDOW) -> SpectralModel:
    return SpectralModel(signal_line=center, reference_energy=center)


def line_profile(data: Spectrum, center: float, half_width: float = NUCLEAR_HALF_WINDOW,
                 statistic: str = "poisson") -> SignalProfile:
    window = (center - half_width, center + half_width)
    sp = data.window(*window)
    if not sp.lo[0] <= center <= sp.hi[-1]:
        raise ValueError("line centre lies outside the spectrum")
    side = np.sum(np.abs(sp.centers - center) > 3.0 * sp.resolution_sigma)
    if side < 20:
        raise ValueError(f"only {side} side-band bins around the line; need >= 20")
    return SignalProfile(sp, line_model(center), None, statistic)


def line_upper_limit(data: Spectrum, center: float, confidence: float,
                     half_width: float = NUCLEAR_HALF_WINDOW, statistic: str = "poisson") -> float:
    """Upper limit on the counts in a resolution-width line at ``center`` over a quadratic background."""
    return line_profile(data, center, half_width, statistic).upper_limit(confidence)


def fit_line(data: Spectrum, center: float, half_width: float = NUCLEAR_HALF_WINDOW,
             statistic: str = "poisson", confidences=(0.68, 0.95)) -> FitResult:
    return _result_from_profile(line_profile(data, center, half_width, statistic), confidences, 41)


# -- synthetic reference spectra ----------------------------------------------------------

def cosme_like_model(signal_amplitude: float = 0.0, background_level: float = 3.0,
                     peak_counts=(40.0, 80.0, 300.0), exposure: float = COSME_EXPOSURE,
                     template=None) -> SpectralModel:
    """Background-dominated low-energy Ge spectrum with the Cu/Zn/Ga X-ray lines.

    ``background_level`` is in counts/keV/kg/day at the window centre, with a
    mild downward slope and curvature; ``peak_counts`` are the line areas.
    """
    from .excitation_rates import DEFAULT_SIGNAL

    if template is None:
        template = DEFAULT_SIGNAL.template(COSME_WINDOW[0] - 2.0, COSME_WINDOW[1] + 2.0)
    b0 = background_level * exposure
    bg = (b0, -0.04 * b0, 0.004 * b0)
    peaks = tuple(zip(XRAY_PEAKS_KEV.values(), peak_counts))
    return SpectralModel(bg, peaks, template, signal_amplitude, reference_energy=11.0)


def rico_grande_like_model(line_counts: float = 0.0, background_per_keV: float = 0.2,
                           center: float = 2165.0) -> SpectralModel:
    """Flat-ish low background around a nuclear line, expressed in counts/keV for the run."""
    return SpectralModel((background_per_keV, -1e-4 * background_per_keV, 0.0), (), None, line_counts,
                         signal_line=center, reference_energy=center)
