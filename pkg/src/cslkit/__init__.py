"""Continuous spontaneous localization toolkit.

Stochastic collapse trajectories, density-matrix evolution, spontaneous
excitation and radiation rates, and spectral fits that turn detector
spectra into bounds on the relative collapse couplings.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .params import ConfigurationError, CslParams, ParticleSpecies, StepSizeError  # noqa: E402
from .lattice import LatticeSystem  # noqa: E402

__all__ = ["__version__", "ConfigurationError", "CslParams", "ParticleSpecies", "StepSizeError",
           "LatticeSystem"]
