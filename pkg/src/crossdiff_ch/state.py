from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class State:
    """Volume fractions at one time level, stored species-major.

    ``values[i, K]`` is the fraction of species ``i`` in cell ``K``.
    """

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float, ndmin=2)

    @property
    def n_species(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "State":
        return State(self.values.copy(), self.time)

    def volume_filling_defect(self) -> float:
        return float(np.max(np.abs(self.values.sum(axis=0) - 1.0)))


def as_values(U) -> np.ndarray:
    """Accept a :class:`State` or a plain ``(n_species, n_cells)`` array."""
    if isinstance(U, State):
        return U.values
    return np.asarray(U, dtype=float)
