"""``cslkit`` command line: simulate, evolve, rates, fit, limit, synth.

Each subcommand resolves a run configuration (preset < config file <
command-line flags), runs one engine, and writes CSV tables plus a
plain-text report with provenance into ``--out``.  Exit status is 0 only
when every step succeeded.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import constants as const
from . import io as cio
from .density_evolution import (DensityMatrix, lattice_hamiltonian, mean_energy_rate,
                                off_diagonal_decay_rate, observable_series)
from .excitation_rates import (DEFAULT_SIGNAL, NuclearConfig, constrain_ge, electron_ionization_rate,
                               expected_nuclear_counts, free_particle_radiation_spectrum, gn_bounds,
                               gn_coefficient, nuclear_count_prefactor)
from .lattice import LatticeSystem
from .params import ELECTRON, PROTON, ConfigurationError, CslParams, ParticleSpecies, StepSizeError
from .spectrum_analysis import (FitError, ModelError, SpectralModel, cosme_like_model, expected_counts,
                                fit_line, fit_spectrum, rico_grande_like_model, synth_spectrum,
                                uniform_edges)
from .collapse_dynamics import sample_outcome_statistics

GRW = {"lambda_per_s": const.GRW_LAMBDA, "a_cm": const.GRW_A}

PRESETS: dict[str, dict[str, dict]] = {
    "grw-headlines": {
        "csl": dict(GRW),
        "rates": {"table": "headlines", "e_min_keV": 1.0, "e_max_keV": 20.0, "n_points": 20},
        "simulate": {"outcome_2_probability": 0.5, "n_trajectories": 10_000},
    },
    "rico-grande": {
        "csl": dict(GRW),
        "rates": {"table": "nuclear"},
        "nuclear": {"mass_number": 74, "isotopic_fraction": 0.14, "exposure_kg_days": 414.3,
                    "beta": 0.3, "c_expt_counts": 0.89, "line_keV": 2165.0},
        "fit": {"template": "line", "statistic": "poisson"},
        "synth": {"kind": "rico-grande", "bin_width_keV": 1.0, "resolution_sigma_keV": 1.0,
                  "exposure_kg_days": 414.3},
    },
    "cosme": {
        "csl": dict(GRW),
        "rates": {"table": "atomic", "e_min_keV": 5.0, "e_max_keV": 17.0, "n_points": 121},
        "fit": {"template": "csl-ce", "statistic": "pearson", "e_min_keV": 5.0, "e_max_keV": 17.0},
        "synth": {"kind": "cosme", "exposure_kg_days": 85.24, "bin_width_keV": 0.1,
                  "resolution_sigma_keV": 0.18},
    },
}


class CliError(Exception):
    """User-facing failure; ``status`` is the process exit code."""

    def __init__(self, message: str, status: int = 2):
        super().__init__(message)
        self.status = status


def _params(cfg: cio.RunConfig) -> CslParams:
    c = cio.section(cfg, "csl")
    return CslParams(c["lambda_per_s"], c["a_cm"], {"p": 1.0, "n": c["g_n"], "e": c["g_e"]})


def _nuclear_config(cfg: cio.RunConfig) -> NuclearConfig:
    n = cio.section(cfg, "nuclear")
    return NuclearConfig(n["mass_number"], 32, n["line_keV"], n["isotopic_fraction"], n["beta"])


# -- subcommands ------------------------------------------------------------------------

def cmd_simulate(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    s = cio.section(cfg, "simulate")
    p2 = s["outcome_2_probability"]
    amps = np.array([math.sqrt(1.0 - p2), math.sqrt(p2)])
    stats = sample_outcome_statistics(amps, s["collapse_rate_gap_per_s"], s["n_trajectories"],
                                      s["horizon_s"], cfg.seed, dt=s["dt_s"], mode=s["mode"])
    res = stats.ensemble
    # outcome column: 1 or 2 for collapsed trajectories, 0 when still uncollapsed
    rows = ((i, o + 1, k, w) for i, o, k, w in res.rows())
    report = cio.Report("simulate", cfg)
    report.add_output(cio.write_trajectories(out / "trajectories.csv", rows))

    targets = np.array([1.0 - p2, p2])
    band = stats.born_band(targets, s["band_sigma"])
    table = [(f"outcome_{k + 1}", targets[k], stats.frequencies[k], band[k]) for k in range(2)]
    header = ("outcome", "target_probability", "observed_frequency", f"band_{s['band_sigma']:g}sigma")
    report.add_output(cio.write_csv(out / "summary.csv", header, table))
    report.add(",".join(header))
    for name, t, f, b in table:
        report.add(f"{name},{t:.6g},{f:.6g},±{b:.3g}")
    inside = bool(np.all(np.abs(stats.frequencies - targets) <= band))
    report.add(f"within_band: {'yes' if inside else 'no'}")
    report.add(f"n_collapsed: {stats.n_collapsed}")
    report.add(f"n_uncollapsed: {stats.n_uncollapsed}")
    report.add(f"effective_n: {stats.effective_n:.6g}")
    report.add(f"dt_s: {res.dt:.6g}")
    return report


def cmd_evolve(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    e = cio.section(cfg, "evolve")
    params = _params(cfg)
    report = cio.Report("evolve", cfg)
    if e["scenario"] == "two_clumps":
        N = e["n_particles"]
        system = LatticeSystem.two_clumps(N, e["separation_cm"], e["clump_size_cm"])
        amp = np.array([1.0, 1.0]) / math.sqrt(2.0)
        rows = observable_series(DensityMatrix.pure(amp, system), None, system, params,
                                 e["duration_s"], e["duration_s"] / e["steps"])
        t = np.array([r[0] for r in rows])
        v = np.array([r[2] for r in rows])
        measured = -np.polyfit(t, np.log(v), 1)[0]
        offsets = system.cell_positions[:N, 0]
        expected = off_diagonal_decay_rate(N, 1.0, e["separation_cm"], params, offsets)
        report.add(f"measured_decay_rate_per_s: {measured:.8g}")
        report.add(f"closed_form_decay_rate_per_s: {expected:.8g}")
        report.add(f"lambda_N2_per_s: {params.lambda_ * N * N:.8g}")
        report.add(f"relative_difference: {measured / expected - 1.0:.3e}")
    else:
        sp = ParticleSpecies("particle", e["mass_g"], 0.0, "p")
        n = e["n_cells"]
        h = e["spacing_cm"]
        system = LatticeSystem.line(n, h, species="particle", origin=-h * (n - 1) / 2.0,
                                    species_table={"particle": sp})
        m, w, hbar = e["mass_g"], e["omega_per_s"], e["hbar_erg_s"]
        H = lattice_hamiltonian(system, m, hbar, potential=lambda x: 0.5 * m * w * w * x * x)
        ground = np.linalg.eigh(H)[1][:, 0]
        rows = observable_series(DensityMatrix.pure(ground, system), H, system, params,
                                 e["duration_s"], e["duration_s"] / e["steps"], hbar=hbar, coherence=None)
        t = np.array([r[0] for r in rows])
        v = np.array([r[2] for r in rows])
        slope = np.polyfit(t, v, 1)[0]
        closed = mean_energy_rate({sp: 1}, params, hbar=hbar, dim=1, energy_unit=1.0)
        report.add(f"numeric_energy_slope_erg_per_s: {slope:.8g}")
        report.add(f"closed_form_energy_rate_erg_per_s: {closed:.8g}")
        report.add(f"relative_difference: {slope / closed - 1.0:.3e}")
    report.add_output(cio.write_timeseries(out / "timeseries.csv", rows))
    return report


def cmd_rates(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    r = cio.section(cfg, "rates")
    params = _params(cfg)
    report = cio.Report("rates", cfg)
    report.add(f"scale_lambda_over_a2_vs_grw: {params.scale_vs_grw:.6g}")
    if r["table"] == "headlines":
        n = r["n_particles"]
        nucleon = mean_energy_rate({PROTON: n}, params)
        electron = mean_energy_rate({ELECTRON: n}, params)
        const_e = free_particle_radiation_spectrum(1.0, ELECTRON, params)
        report.add(f"energy_gain_nucleons_eV_per_s: {nucleon:.4g}  (per {n:g} nucleons)")
        report.add(f"energy_gain_electrons_eV_per_s: {electron:.4g}  (per {n:g} electrons)")
        report.add(f"free_electron_spectrum_counts_per_s_per_keV: {const_e:.4g} / E_keV  (per electron)")
        E = np.linspace(r["e_min_keV"], r["e_max_keV"], r["n_points"])
        path = cio.write_csv(out / "rates.csv", ("E_keV", "rate_counts_per_s_per_keV"),
                             zip(E, free_particle_radiation_spectrum(E, ELECTRON, params)))
        report.add_output(path)
    elif r["table"] == "nuclear":
        nc = cio.section(cfg, "nuclear")
        config = _nuclear_config(cfg)
        pref = nuclear_count_prefactor(config, params)
        k = gn_coefficient(nc["isotopic_fraction"], nc["exposure_kg_days"], params, nc["mass_number"])
        counts0 = expected_nuclear_counts(config, 0.0, nc["exposure_kg_days"], params)
        report.add(f"count_prefactor_per_kg_day: {pref:.5g}  (times X beta^2 (1 - g_n)^2)")
        report.add(f"expected_counts_at_g_n_0: {counts0:.5g}")
        report.add(f"k_coefficient: {k:.4f}")
        res = gn_bounds(nc["c_expt_counts"], nc["beta"], nc["isotopic_fraction"], nc["exposure_kg_days"],
                        params, nc["confidence"], nc["mass_number"])
        report.add(res.report())
    else:
        E = np.linspace(r["e_min_keV"], r["e_max_keV"], r["n_points"])
        g_e = params.couplings["e"]
        rate = electron_ionization_rate(E, g_e, params, DEFAULT_SIGNAL)
        path = cio.write_csv(out / "rates.csv", ("E_keV", "rate_counts_per_keV_kg_day"), zip(E, rate))
        report.add_output(path)
        report.add(f"threshold_keV: {DEFAULT_SIGNAL.threshold:g}")
        report.add(f"decay_constant_keV: {DEFAULT_SIGNAL.decay_constant:.5g}")
        limit = cio.section(cfg, "fit")["signal_limit"]
        if limit is not None:
            report.add(constrain_ge(limit, params.scale_vs_grw).report())
    return report


def _cosme_fit_model(f: dict) -> SpectralModel:
    template = DEFAULT_SIGNAL.template(f["e_min_keV"] - 2.0, f["e_max_keV"] + 2.0)
    return SpectralModel(peaks=tuple((c, 0.0) for c in f["peaks_keV"]), signal_template=template,
                         reference_energy=0.5 * (f["e_min_keV"] + f["e_max_keV"]))


def _read_spectrum(args, report: cio.Report):
    data = cio.read_spectrum(args.spectrum, args.meta)
    report.add_input(args.spectrum)
    report.add_input(args.meta if args.meta is not None else cio.meta_path_for(args.spectrum))
    return data


def _confidences(cl: float) -> tuple[float, ...]:
    return tuple(sorted({cl, 0.95}))


def _line_limit(cfg: cio.RunConfig, out: Path, args, report: cio.Report) -> float:
    nc = cio.section(cfg, "nuclear")
    f = cio.section(cfg, "fit")
    data = _read_spectrum(args, report)
    res = fit_line(data, nc["line_keV"], nc["half_window_keV"], f["statistic"], _confidences(nc["confidence"]))
    report.add(res.report(signal_name="line_counts"))
    if res.profile:
        report.add_output(cio.write_profile(out / "profile.csv", res.profile))
    return res.upper_limits[nc["confidence"]]


def cmd_fit(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    f = cio.section(cfg, "fit")
    params = _params(cfg)
    report = cio.Report("fit", cfg)
    if f["template"] == "line":
        return _finish_line(cfg, out, args, report)
    limit = f["signal_limit"]
    if limit is None:
        if args.spectrum is None:
            raise CliError("fit needs a spectrum file or a signal limit")
        data = _read_spectrum(args, report)
        model = _cosme_fit_model(f)
        res = fit_spectrum(data, model, (f["e_min_keV"], f["e_max_keV"]), f["statistic"],
                           _confidences(f["confidence"]), f["scan_points"])
        report.add(res.report(signal_name="signal_fraction"))
        if res.profile:
            report.add_output(cio.write_profile(out / "profile.csv", res.profile))
        names = list(res.parameters)
        coeffs = [res.parameters[k] for k in names]
        best = SpectralModel(coeffs[:3], tuple(zip(f["peaks_keV"], coeffs[3:])), model.signal_template,
                             res.signal, reference_energy=res.reference_energy)
        sp = data.window(f["e_min_keV"], f["e_max_keV"])
        mu = expected_counts(best, sp.bin_edges, sp.exposure, sp.resolution_sigma)
        path = cio.write_csv(out / "model.csv", ("e_low_keV", "e_high_keV", "counts", "model_counts"),
                             zip(sp.lo, sp.hi, sp.counts, mu))
        report.add_output(path)
        limit = res.upper_limits[f["confidence"]]
    else:
        report.add(f"signal_fraction_limit (given): {limit:.6g}")
    report.add(constrain_ge(limit, params.scale_vs_grw, f["confidence"]).report())
    return report


def _finish_line(cfg, out, args, report) -> cio.Report:
    nc = cio.section(cfg, "nuclear")
    params = _params(cfg)
    if args.spectrum is not None:
        c = _line_limit(cfg, out, args, report)
    else:
        c = nc["c_expt_counts"]
        report.add(f"line_count_limit (given): {c:.6g}")
    res = gn_bounds(c, nc["beta"], nc["isotopic_fraction"], nc["exposure_kg_days"], params,
                    nc["confidence"], nc["mass_number"])
    report.add(res.report())
    return report


def cmd_limit(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    return _finish_line(cfg, out, args, cio.Report("limit", cfg))


def cmd_synth(cfg: cio.RunConfig, out: Path, args) -> cio.Report:
    s = cio.section(cfg, "synth")
    report = cio.Report("synth", cfg)
    if s["kind"] == "cosme":
        model = cosme_like_model(s["signal_amplitude"], s["background_per_keV_kg_day"],
                                 exposure=s["exposure_kg_days"])
        f = cio.section(cfg, "fit")
        edges = uniform_edges(f["e_min_keV"], f["e_max_keV"], s["bin_width_keV"])
    else:
        nc = cio.section(cfg, "nuclear")
        model = rico_grande_like_model(s["line_counts"], s["line_background_per_keV"], nc["line_keV"])
        hw = nc["half_window_keV"] + 15.0
        edges = uniform_edges(nc["line_keV"] - hw, nc["line_keV"] + hw, s["bin_width_keV"])
    sigma = s["resolution_sigma_keV"]
    sp = synth_spectrum(model, s["exposure_kg_days"], edges, cfg.seed, sigma)
    p, m = cio.write_spectrum(out / "spectrum.csv", sp)
    mu = expected_counts(model, edges, s["exposure_kg_days"], sigma)
    mpath = cio.write_csv(out / "model.csv", ("e_low_keV", "e_high_keV", "expected_counts"),
                          zip(edges[:-1], edges[1:], mu))
    for path in (p, m, mpath):
        report.add_output(path)
    report.add(f"bins: {sp.counts.size}")
    report.add(f"total_counts: {sp.counts.sum():g}")
    report.add(f"expected_total_counts: {mu.sum():.6g}")
    return report


COMMANDS: dict[str, tuple[Callable, str]] = {
    "simulate": (cmd_simulate, "two-outcome collapse ensemble and Born-rule table"),
    "evolve": (cmd_evolve, "density-matrix evolution time series"),
    "rates": (cmd_rates, "closed-form rate tables and coupling bounds"),
    "fit": (cmd_fit, "fit a spectrum and convert the signal limit to a coupling bound"),
    "limit": (cmd_limit, "nuclear-line count limit and the resulting g_n/g_p interval"),
    "synth": (cmd_synth, "write a synthetic spectrum with its metadata"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cslkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cslkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="run configuration (key = value with [sections])")
        p.add_argument("--seed", type=int, help=f"master seed (default {cio.DEFAULT_SEED})")
        p.add_argument("--out", type=Path, default=Path("cslkit-out"), help="output directory")
        p.add_argument("--preset", help=f"operating point: {', '.join(PRESETS)}")
        if name in ("fit", "limit"):
            p.add_argument("spectrum", nargs="?", type=Path, help="spectrum CSV (e_low_keV,e_high_keV,counts)")
            p.add_argument("--meta", type=Path, help="metadata sidecar (default: <spectrum>.meta)")
        if name == "fit":
            p.add_argument("--signal-limit", type=float,
                           help="skip the fit and use this signal-fraction limit")
        if name == "limit":
            p.add_argument("--counts-limit", type=float, help="skip the fit and use this line-count limit")
    return parser


def resolve_config(args) -> cio.RunConfig:
    text, source = "", None
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from None
        source = str(args.config)
    preset = args.preset
    if preset is None:
        preset = cio.parse_config(text, source).sections["run"].get("preset")
    overrides: dict[str, dict] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; available presets: {', '.join(PRESETS)}")
        overrides = {k: dict(v) for k, v in PRESETS[preset].items()}
        overrides.setdefault("run", {})["preset"] = preset
    cfg = cio.parse_config(text, source, overrides=overrides, seed=args.seed)
    if getattr(args, "signal_limit", None) is not None:
        if args.signal_limit < 0:
            raise CliError("--signal-limit must be >= 0")
        cio.section(cfg, "fit")["signal_limit"] = args.signal_limit
    if getattr(args, "counts_limit", None) is not None:
        if args.counts_limit < 0:
            raise CliError("--counts-limit must be >= 0")
        cio.section(cfg, "nuclear")["c_expt_counts"] = args.counts_limit
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        cfg = resolve_config(args)
        if args.command in ("limit",) and args.spectrum is None and args.counts_limit is None \
                and cfg.sections.get("run", {}).get("preset") is None:
            raise CliError("limit needs a spectrum file, --counts-limit, or a preset")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            report = func(cfg, out, args)
        path = report.write(out / f"{args.command}_report.txt")
        atomic_path = cio.atomic_write(out / f"{args.command}_config.ini", cfg.canonical())
    except CliError as exc:
        print(f"cslkit {args.command}: error: {exc}", file=sys.stderr)
        return exc.status
    except (cio.ConfigError, cio.SpectrumFormatError, ConfigurationError, ModelError) as exc:
        print(f"cslkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FitError, StepSizeError, ValueError) as exc:
        print(f"cslkit {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    print("\n".join(report.results))
    print(f"report: {path}")
    print(f"config: {atomic_path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
