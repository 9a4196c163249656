"""Discrete configuration bases for small collapse simulations.

A ``LatticeSystem`` is a set of cells (points in 1-D or 3-D space, each the
center of a cube of edge ``cell_size``) together with an explicit list of
basis configurations.  Each configuration places every particle in exactly
one cell, so operators that are diagonal in position (the smeared number
operator, the decoherence factor) are diagonal in this basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .params import STANDARD_SPECIES, ConfigurationError, CslParams, ParticleSpecies

Assignment = tuple[str, int]  # (species name, cell index)


@dataclass(frozen=True, eq=False)
class LatticeSystem:
    cell_positions: np.ndarray
    particle_assignments: tuple[tuple[Assignment, ...], ...]
    cell_size: float
    species: Mapping[str, ParticleSpecies] = field(default_factory=lambda: STANDARD_SPECIES)

    def __post_init__(self):
        pos = np.asarray(self.cell_positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[1] not in (1, 2, 3):
            raise ConfigurationError("cell_positions must be (n_cells, d) with d in 1..3")
        if pos.shape[0] == 0:
            raise ConfigurationError("system needs at least one cell")
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("cell positions must be finite")
        if not (np.isfinite(self.cell_size) and self.cell_size > 0):
            raise ConfigurationError("cell_size must be positive and finite")
        pos.setflags(write=False)
        object.__setattr__(self, "cell_positions", pos)

        configs = tuple(tuple((str(s), int(c)) for s, c in conf) for conf in self.particle_assignments)
        if not configs:
            raise ConfigurationError("system needs at least one basis configuration")
        for b, conf in enumerate(configs):
            for name, cell in conf:
                if name not in self.species:
                    raise ConfigurationError(f"configuration {b}: unknown species {name!r}")
                if not 0 <= cell < pos.shape[0]:
                    raise ConfigurationError(f"configuration {b}: cell index {cell} out of range")
        object.__setattr__(self, "particle_assignments", configs)

    @property
    def dim(self) -> int:
        return self.cell_positions.shape[1]

    @property
    def n_cells(self) -> int:
        return self.cell_positions.shape[0]

    @property
    def n_basis(self) -> int:
        return len(self.particle_assignments)

    @property
    def cell_measure(self) -> float:
        return self.cell_size**self.dim

    def particle_table(self, params: CslParams):
        """Flatten all configurations into per-particle arrays.

        Returns ``(owner, positions, couplings, masses)`` where ``owner[i]``
        is the basis index the i-th listed particle belongs to.
        """
        owner, cells, g, m = [], [], [], []
        for b, conf in enumerate(self.particle_assignments):
            for name, cell in conf:
                sp = self.species[name]
                owner.append(b)
                cells.append(cell)
                g.append(params.coupling(sp))
                m.append(sp.mass)
        positions = self.cell_positions[np.asarray(cells, dtype=int)].reshape(len(cells), self.dim)
        return (np.asarray(owner, dtype=int), positions,
                np.asarray(g, dtype=float), np.asarray(m, dtype=float))

    # -- constructors -----------------------------------------------------

    @classmethod
    def line(cls, n_cells: int, spacing: float, species: str = "proton",
             origin: float = 0.0, species_table: Mapping[str, ParticleSpecies] | None = None):
        """One particle on a 1-D line; basis state ``k`` puts it in cell ``k``."""
        if n_cells < 1:
            raise ConfigurationError("n_cells must be >= 1")
        pos = origin + spacing * np.arange(n_cells, dtype=float)
        configs = tuple(((species, k),) for k in range(n_cells))
        return cls(pos, configs, spacing, species_table or STANDARD_SPECIES)

    @classmethod
    def two_clumps(cls, n_per_clump: int, separation: float, clump_size: float = 0.0,
                   species: str = "proton", dim: int = 1,
                   species_table: Mapping[str, ParticleSpecies] | None = None):
        """Two basis states: N particles clumped near 0, or the same clump shifted by ``separation``.

        Particles inside a clump sit on distinct cells spread evenly over
        ``clump_size`` along the first axis.
        """
        if n_per_clump < 1:
            raise ConfigurationError("n_per_clump must be >= 1")
        if n_per_clump > 1 and clump_size > 0:
            offsets = np.linspace(0.0, clump_size, n_per_clump)
        else:
            offsets = np.zeros(n_per_clump)
        pos = np.zeros((2 * n_per_clump, dim))
        pos[:n_per_clump, 0] = offsets
        pos[n_per_clump:, 0] = offsets + separation
        first = tuple((species, k) for k in range(n_per_clump))
        second = tuple((species, n_per_clump + k) for k in range(n_per_clump))
        step = clump_size / max(n_per_clump - 1, 1) if clump_size > 0 else max(separation, 1e-300)
        return cls(pos, (first, second), step, species_table or STANDARD_SPECIES)

    @classmethod
    def from_configurations(cls, cell_positions: Sequence, configurations: Sequence,
                            cell_size: float,
                            species_table: Mapping[str, ParticleSpecies] | None = None):
        return cls(np.asarray(cell_positions, dtype=float), tuple(configurations), cell_size,
                   species_table or STANDARD_SPECIES)
