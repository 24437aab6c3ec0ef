"""Materialized record sets: one row per unit, ``-1`` marking a missing entry."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tables import VariableSpace

MISSING = -1


class Dataset:
    """``n`` records over the study variables of ``space``.

    ``codes[i, k]`` is the level index of variable ``k`` for record ``i`` in
    space order, or ``-1`` when the entry is missing.
    """

    __slots__ = ("space", "codes")

    def __init__(self, space: VariableSpace, codes):
        arr = np.array(codes, dtype=np.int64)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, len(space.variables))
        if arr.ndim != 2 or arr.shape[1] != len(space.variables):
            raise ValidationError(f"records need {len(space.variables)} columns")
        sizes = np.array([v.size for v in space.variables])
        if np.any(arr < MISSING) or np.any(arr >= sizes[None, :]):
            raise ValidationError("record contains an invalid level code")
        arr.setflags(write=False)
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "codes", arr)

    def __setattr__(self, key, value):
        raise AttributeError("Dataset is immutable")

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def missing(self) -> np.ndarray:
        return self.codes == MISSING

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.space.index(name)]

    def missing_fractions(self) -> dict[str, float]:
        if self.n == 0:
            return {v.name: 0.0 for v in self.space.variables}
        frac = self.missing.mean(axis=0)
        return {v.name: float(f) for v, f in zip(self.space.variables, frac)}

    def materialized_counts(self) -> np.ndarray:
        """Counts over the materialized cells (``"*"`` is the last index per axis)."""
        shape = tuple(v.size + 1 for v in self.space.variables)
        idx = np.where(self.codes == MISSING, np.array(shape) - 1, self.codes)
        flat = np.ravel_multi_index(idx.T, shape) if self.n else np.zeros(0, dtype=np.int64)
        return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.space == other.space
                and np.array_equal(self.codes, other.codes))

    def __repr__(self):
        return f"Dataset(n={self.n}, variables={list(self.space.names)})"
