"""File formats: run configurations, spectrum CSV, result tables and reports.

Run configurations are INI-style ``key = value`` files.  Every physical
quantity carries its unit in the key name (``horizon_s``, ``a_cm``,
``exposure_kg_days``); unknown sections and keys are rejected with the line
number on which they appear.  All writers go through :func:`atomic_write`.
"""

from __future__ import annotations

import configparser
import csv
import datetime as _dt
import hashlib
import io as _io
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .spectrum_analysis import Spectrum

DEFAULT_SEED = 20260101


class ConfigError(ValueError):
    """Invalid run configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class SpectrumFormatError(ValueError):
    """Malformed spectrum or metadata file; ``row`` is the 1-based file line."""

    def __init__(self, message: str, row: int | None = None, source: str | None = None):
        self.row = row
        loc = f"{source or 'spectrum'}" + (f", row {row}" if row is not None else "")
        super().__init__(f"{loc}: {message}")


# -- schema -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any = None
    check: Callable[[Any], bool] | None = None
    requirement: str = ""


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {t!r}")
        return t
    return parse


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _prob(v) -> bool:
    return 0.0 < v < 1.0


def _confidence(v) -> bool:
    return 0.0 < v < 1.0


POS = "must be > 0"
NONNEG = "must be >= 0"

SCHEMA: dict[str, dict[str, Field]] = {
    "run": {
        "seed": Field(int, None, _nonneg, NONNEG),
        "preset": Field(str, None),
    },
    "csl": {
        "lambda_per_s": Field(float, 1e-16, _nonneg, NONNEG),
        "a_cm": Field(float, 1e-5, _positive, POS),
        "g_n": Field(float, 1.0, _nonneg, NONNEG),
        "g_e": Field(float, 1.0, _nonneg, NONNEG),
    },
    "simulate": {
        "outcome_2_probability": Field(float, 0.5, _prob, "must lie strictly between 0 and 1"),
        "n_trajectories": Field(int, 10_000, lambda v: v >= 100, "must be >= 100"),
        "collapse_rate_gap_per_s": Field(float, 1.0, _positive, POS),
        "horizon_s": Field(float, 20.0, _positive, POS),
        "dt_s": Field(float, None, _positive, POS),
        "mode": Field(_choice("physical", "raw"), "physical"),
        "band_sigma": Field(float, 3.0, _positive, POS),
    },
    "evolve": {
        "scenario": Field(_choice("two_clumps", "oscillator"), "two_clumps"),
        "n_particles": Field(int, 1, lambda v: v >= 1, "must be >= 1"),
        "separation_cm": Field(float, 1e-4, _positive, POS),
        "clump_size_cm": Field(float, 0.0, _nonneg, NONNEG),
        "duration_s": Field(float, 1e15, _positive, POS),
        "steps": Field(int, 50, lambda v: v >= 2, "must be >= 2"),
        "n_cells": Field(int, 121, lambda v: v >= 3, "must be >= 3"),
        "spacing_cm": Field(float, 0.1, _positive, POS),
        "mass_g": Field(float, 1.0, _positive, POS),
        "omega_per_s": Field(float, 1.0, _nonneg, NONNEG),
        "hbar_erg_s": Field(float, 1.0, _positive, POS),
    },
    "rates": {
        "table": Field(_choice("headlines", "nuclear", "atomic"), "headlines"),
        "e_min_keV": Field(float, 1.0, _positive, POS),
        "e_max_keV": Field(float, 20.0, _positive, POS),
        "n_points": Field(int, 20, lambda v: v >= 2, "must be >= 2"),
        "n_particles": Field(float, 1e24, _positive, POS),
    },
    "nuclear": {
        "mass_number": Field(int, 74, lambda v: v >= 1, "must be >= 1"),
        "isotopic_fraction": Field(float, 0.14, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        "exposure_kg_days": Field(float, 414.3, _positive, POS),
        "beta": Field(float, 0.3, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        "c_expt_counts": Field(float, 0.89, _nonneg, NONNEG),
        "line_keV": Field(float, 2165.0, _positive, POS),
        "half_window_keV": Field(float, 25.0, _positive, POS),
        "confidence": Field(float, 0.68, _confidence, "must lie strictly between 0 and 1"),
    },
    "fit": {
        "template": Field(_choice("csl-ce", "line"), "csl-ce"),
        "statistic": Field(_choice("pearson", "poisson"), "pearson"),
        "e_min_keV": Field(float, 5.0, _nonneg, NONNEG),
        "e_max_keV": Field(float, 17.0, _positive, POS),
        "confidence": Field(float, 0.68, _confidence, "must lie strictly between 0 and 1"),
        "scan_points": Field(int, 41, lambda v: v >= 0, NONNEG),
        "peaks_keV": Field(_floats, (8.05, 8.64, 9.25)),
        "signal_limit": Field(float, None, _nonneg, NONNEG),
    },
    "synth": {
        "kind": Field(_choice("cosme", "rico-grande"), "cosme"),
        "signal_amplitude": Field(float, 0.0, _nonneg, NONNEG),
        "background_per_keV_kg_day": Field(float, 3.0, _nonneg, NONNEG),
        "exposure_kg_days": Field(float, 85.24, _positive, POS),
        "bin_width_keV": Field(float, 0.1, _positive, POS),
        "resolution_sigma_keV": Field(float, 0.18, _positive, POS),
        "line_counts": Field(float, 0.0, _nonneg, NONNEG),
        "line_background_per_keV": Field(float, 0.2, _nonneg, NONNEG),
    },
}


# -- config objects ---------------------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved configuration: every schema field of the used sections, plus seed."""

    sections: dict[str, dict[str, Any]]
    seed: int
    source: str | None = None
    lines: dict[tuple[str, str], int] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    def canonical(self) -> str:
        """Deterministic INI text of the resolved values; re-parsing it gives the same config."""
        out = []
        for sec in sorted(self.sections):
            out.append(f"[{sec}]")
            for key in sorted(self.sections[sec]):
                val = self.sections[sec][key]
                if val is None:
                    continue
                out.append(f"{key} = {_format_value(val)}")
            out.append("")
        return "\n".join(out)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, tuple):
        return ", ".join(_format_value(v) for v in val)
    return str(val)


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str], int]:
    index, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, ""), n)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            index.setdefault((section, m.group(1).strip()), n)
    return index


def parse_config(text: str, source: str | None = None,
                 overrides: Mapping[str, Mapping[str, Any]] | None = None,
                 seed: int | None = None) -> RunConfig:
    """Parse and validate configuration text.

    ``overrides`` are preset values applied underneath the file (the file
    wins); ``seed`` from the command line wins over both.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, source) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, source) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", exc.lineno, source) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", lineno, source) from None
    lines = _line_index(text)

    values: dict[str, dict[str, Any]] = {}
    for sec, fields in (overrides or {}).items():
        values.setdefault(sec, {}).update(fields)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]; known: {', '.join(SCHEMA)}",
                              lines.get((sec, "")), source)
        schema = SCHEMA[sec]
        for key, raw in cp.items(sec):
            ln = lines.get((sec, key))
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", ln, source)
            try:
                val = schema[key].parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sec}.{key}: {exc}", ln, source) from None
            values.setdefault(sec, {})[key] = val

    resolved: dict[str, dict[str, Any]] = {}
    for sec, given in values.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        full = {k: f.default for k, f in SCHEMA[sec].items()}
        for key, val in given.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            f = SCHEMA[sec][key]
            if val is not None and f.check is not None and not f.check(val):
                raise ConfigError(f"{sec}.{key} = {val!r} {f.requirement}", lines.get((sec, key)), source)
            full[key] = val
        resolved[sec] = full

    run = resolved.setdefault("run", {k: f.default for k, f in SCHEMA["run"].items()})
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be >= 0")
        run["seed"] = seed
    if run.get("seed") is None:
        run["seed"] = DEFAULT_SEED
    return RunConfig(resolved, int(run["seed"]), source, lines)


def load_config(path: str | os.PathLike, **kw) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(p)) from None
    return parse_config(text, source=str(p), **kw)


def section(cfg: RunConfig, name: str) -> dict[str, Any]:
    """Resolved section ``name``, filled with defaults if the config did not mention it."""
    if name not in cfg.sections:
        cfg.sections[name] = {k: f.default for k, f in SCHEMA[name].items()}
    return cfg.sections[name]


# -- atomic writers ---------------------------------------------------------------------

def atomic_write(path: str | os.PathLike, text: str) -> Path:
    """Write ``text`` to a sibling temp file, fsync, then rename over ``path``."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", suffix=".tmp", dir=p.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, p)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return p


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write(path, csv_text(header, rows))


TRAJECTORY_HEADER = ("trajectory_index", "outcome", "steps_to_collapse", "final_weight")
TIMESERIES_HEADER = ("t", "observable", "value")
RATE_HEADER = ("E_keV", "rate")
PROFILE_HEADER = ("s", "delta_chi2")
SPECTRUM_HEADER = ("e_low_keV", "e_high_keV", "counts")


def write_trajectories(path, rows) -> Path:
    """Rows of (index, outcome, steps_to_collapse, final_weight); outcome -1 means uncollapsed."""
    return write_csv(path, TRAJECTORY_HEADER, rows)


def write_timeseries(path, rows) -> Path:
    return write_csv(path, TIMESERIES_HEADER, rows)


def write_rate_table(path, energies, rates) -> Path:
    return write_csv(path, RATE_HEADER, zip(np.asarray(energies, float), np.asarray(rates, float)))


def write_profile(path, profile) -> Path:
    return write_csv(path, PROFILE_HEADER, profile)


# -- spectrum files ---------------------------------------------------------------------

def meta_path_for(spectrum_path) -> Path:
    p = Path(spectrum_path)
    return p.with_name(p.stem + ".meta")


def write_spectrum(path, spectrum: Spectrum, meta_path=None) -> tuple[Path, Path]:
    """Spectrum CSV plus its ``key = value`` metadata sidecar."""
    rows = zip(spectrum.lo, spectrum.hi, spectrum.counts)
    p = write_csv(path, SPECTRUM_HEADER, rows)
    m = Path(meta_path) if meta_path is not None else meta_path_for(path)
    atomic_write(m, f"exposure_kg_days = {spectrum.exposure!r}\n"
                    f"resolution_sigma_keV = {spectrum.resolution_sigma!r}\n")
    return p, m


META_KEYS = ("exposure_kg_days", "resolution_sigma_keV")


def read_meta(path) -> dict[str, float]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise SpectrumFormatError(f"cannot read metadata: {exc.strerror}", source=str(p)) from None
    out: dict[str, float] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise SpectrumFormatError("expected key = value", n, str(p))
        key, val = (t.strip() for t in s.split("=", 1))
        if key not in META_KEYS:
            raise SpectrumFormatError(f"unknown key {key!r}", n, str(p))
        try:
            v = float(val)
        except ValueError:
            raise SpectrumFormatError(f"{key} is not a number: {val!r}", n, str(p)) from None
        if not (math.isfinite(v) and v > 0):
            raise SpectrumFormatError(f"{key} must be positive", n, str(p))
        out[key] = v
    missing = [k for k in META_KEYS if k not in out]
    if missing:
        raise SpectrumFormatError(f"missing {', '.join(missing)}", source=str(p))
    return out


def read_spectrum(path, meta_path=None) -> Spectrum:
    """Parse a spectrum CSV; bins must be contiguous, ascending, with non-negative counts."""
    p = Path(path)
    src = str(p)
    try:
        text = p.read_text()
    except OSError as exc:
        raise SpectrumFormatError(f"cannot read spectrum: {exc.strerror}", source=src) from None
    reader = csv.reader(_io.StringIO(text))
    lo, hi, counts = [], [], []
    header_seen = False
    for n, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in row]
        if not header_seen:
            if tuple(cells) != SPECTRUM_HEADER:
                raise SpectrumFormatError(f"header must be {','.join(SPECTRUM_HEADER)}", n, src)
            header_seen = True
            continue
        if len(cells) != 3:
            raise SpectrumFormatError(f"expected 3 columns, found {len(cells)}", n, src)
        try:
            a, b, c = (float(x) for x in cells)
        except ValueError:
            raise SpectrumFormatError("non-numeric field", n, src) from None
        if not all(math.isfinite(x) for x in (a, b, c)):
            raise SpectrumFormatError("non-finite field", n, src)
        if c < 0:
            raise SpectrumFormatError(f"negative count {c:g}", n, src)
        if b <= a:
            raise SpectrumFormatError("bin upper edge must exceed lower edge", n, src)
        if hi and not math.isclose(a, hi[-1], rel_tol=1e-9, abs_tol=1e-9):
            raise SpectrumFormatError("bins must be contiguous and ascending", n, src)
        lo.append(a)
        hi.append(b)
        counts.append(c)
    if not header_seen:
        raise SpectrumFormatError("empty file", source=src)
    if not counts:
        raise SpectrumFormatError("no bins", source=src)
    meta = read_meta(meta_path if meta_path is not None else meta_path_for(p))
    edges = np.append(lo, hi[-1])
    return Spectrum(edges, np.asarray(counts), meta["exposure_kg_days"], meta["resolution_sigma_keV"])


# -- reports ----------------------------------------------------------------------------

@dataclass
class Report:
    """Plain-text report: results block, config echo and provenance.

    Everything except the ``timestamp`` line is a deterministic function of
    the resolved config, so archived reports can be regenerated and compared.
    """

    command: str
    config: RunConfig
    results: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    inputs: dict[str, str] = field(default_factory=dict)
    timestamp: str | None = None

    def add(self, text: str) -> None:
        self.results.extend(text.splitlines())

    def add_output(self, path) -> None:
        self.outputs.append(Path(path).name)

    def add_input(self, path) -> None:
        """Record the sha256 of an input file that is not part of the config."""
        p = Path(path)
        self.inputs[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()

    def render(self) -> str:
        ts = self.timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        lines = [f"# cslkit {self.command} report", "", "[results]", *self.results, ""]
        if self.outputs:
            lines += ["[outputs]", *self.outputs, ""]
        lines += ["[config]", self.config.canonical().rstrip(), "",
                  "[provenance]",
                  f"tool_version = {__version__}",
                  f"seed = {self.config.seed}",
                  f"config_sha256 = {self.config.sha256}",
                  *(f"input_sha256[{k}] = {v}" for k, v in sorted(self.inputs.items())),
                  f"timestamp = {ts}", ""]
        return "\n".join(lines)

    def write(self, path) -> Path:
        return atomic_write(path, self.render())


def strip_timestamp(report_text: str) -> str:
    return "\n".join(l for l in report_text.splitlines() if not l.startswith("timestamp = "))


def config_from_report(report_text: str) -> str:
    """Extract the embedded ``[config]`` block as standalone config text."""
    out, inside = [], False
    for line in report_text.splitlines():
        if line.strip() == "[config]":
            inside = True
            continue
        if inside and line.strip() == "[provenance]":
            break
        if inside:
            out.append(line)
    if not inside:
        raise ValueError("report has no [config] block")
    return "\n".join(out) + "\n"
