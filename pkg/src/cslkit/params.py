"""Collapse-model parameters and particle species."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping

from . import constants as const


class ConfigurationError(ValueError):
    """Invalid model or system configuration."""


class StepSizeError(RuntimeError):
    """Numerical integration left its stable regime."""


@dataclass(frozen=True)
class ParticleSpecies:
    name: str
    mass: float  # g
    charge: float  # units of e
    coupling_key: str

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigurationError(f"species {self.name!r}: mass must be positive")


PROTON = ParticleSpecies("proton", const.PROTON_MASS, 1.0, "p")
NEUTRON = ParticleSpecies("neutron", const.NEUTRON_MASS, 0.0, "n")
ELECTRON = ParticleSpecies("electron", const.ELECTRON_MASS, -1.0, "e")

STANDARD_SPECIES = MappingProxyType({s.name: s for s in (PROTON, NEUTRON, ELECTRON)})


def _default_couplings():
    return {"p": 1.0, "n": 1.0, "e": 1.0}


@dataclass(frozen=True)
class CslParams:
    """Collapse rate ``lambda_`` (1/s), smearing length ``a`` (cm) and couplings.

    ``couplings`` maps a species coupling key to its dimensionless g.  The
    proton coupling, when present, is pinned to 1 so that ``lambda_`` is the
    single-proton collapse rate.
    """

    lambda_: float = const.GRW_LAMBDA
    a: float = const.GRW_A
    couplings: Mapping[str, float] = field(default_factory=_default_couplings)

    def __post_init__(self):
        if not self.lambda_ >= 0:
            raise ConfigurationError("lambda must be non-negative")
        if not self.a > 0:
            raise ConfigurationError("a must be positive")
        for key, g in self.couplings.items():
            if g < 0:
                raise ConfigurationError(f"coupling {key!r} must be non-negative")
        if "p" in self.couplings and self.couplings["p"] != 1.0:
            raise ConfigurationError("proton coupling is fixed to 1 by convention")
        object.__setattr__(self, "couplings", MappingProxyType(dict(self.couplings)))

    def coupling(self, species: ParticleSpecies) -> float:
        try:
            return self.couplings[species.coupling_key]
        except KeyError:
            raise ConfigurationError(
                f"no coupling for species {species.name!r} (key {species.coupling_key!r})"
            ) from None

    @property
    def scale_vs_grw(self) -> float:
        """(lambda/a^2) relative to the GRW value."""
        return (self.lambda_ / self.a**2) / (const.GRW_LAMBDA / const.GRW_A**2)

    def with_couplings(self, **couplings: float) -> "CslParams":
        merged = dict(self.couplings)
        merged.update(couplings)
        return replace(self, couplings=merged)

    @classmethod
    def grw(cls, **couplings: float) -> "CslParams":
        merged = _default_couplings()
        merged.update(couplings)
        return cls(const.GRW_LAMBDA, const.GRW_A, merged)

    @classmethod
    def mass_proportional(cls, lambda_: float = const.GRW_LAMBDA, a: float = const.GRW_A) -> "CslParams":
        """Couplings g = M / M_p for the standard species."""
        return cls(lambda_, a, {
            "p": 1.0,
            "n": const.NEUTRON_MASS / const.PROTON_MASS,
            "e": const.ELECTRON_PROTON_MASS_RATIO,
        })
