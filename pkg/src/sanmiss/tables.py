"""Exact probability tables over finite categorical spaces.

Cells are indexed row-major over the declared variable order; that
bijection is what every file format in the package relies on.  The
placeholder level ``"*"`` marks a missing value in materialized tables and
always occupies the *last* index of a materialized axis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

STAR = "*"
NORMALIZATION_TOL = 1e-12
MAX_CELLS = 10**6


@dataclass(frozen=True)
class Variable:
    name: str
    levels: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.levels)

    def level_index(self, level) -> int:
        if isinstance(level, (int, np.integer)):
            if not 0 <= level < self.size:
                raise ValidationError(f"level index {level} out of range for {self.name!r}")
            return int(level)
        try:
            return self.levels.index(str(level))
        except ValueError:
            raise ValidationError(
                f"unknown level {level!r} for variable {self.name!r}",
                variable=self.name, level=str(level)) from None

    def starred(self) -> "Variable":
        """The materialized version of this variable (levels plus ``"*"``)."""
        return Variable(self.name + STAR, self.levels + (STAR,))


def indicator_name(name: str, block: str = "Y") -> str:
    """Name of the missingness indicator variable for ``name``."""
    return ("M[" if block == "Y" else "W[") + name + "]"


def _indicator_target(name: str) -> tuple[str, str] | None:
    if len(name) > 3 and name[1] == "[" and name[-1] == "]" and name[0] in "MW":
        return name[2:-1], ("Y" if name[0] == "M" else "X")
    return None


def indicator_variable(name: str, block: str = "Y") -> Variable:
    return Variable(indicator_name(name, block), ("0", "1"))


class VariableSpace:
    """Named categorical variables split into an X block and a Y block.

    The Y block carries the auxiliary marginal information.  ``y_names`` is
    kept in the order given at construction, which is the default ordering
    for sequential mechanisms.
    """

    def __init__(self, variables: Sequence[Variable], y_names: Sequence[str]):
        self.variables = tuple(variables)
        self.names = tuple(v.name for v in self.variables)
        self.y_names = tuple(y_names)
        self.x_names = tuple(n for n in self.names if n not in self.y_names)
        self._by_name = {v.name: v for v in self.variables}

    def __getitem__(self, name: str) -> Variable:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValidationError(f"unknown variable {name!r}", variable=name) from None

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __eq__(self, other) -> bool:
        return (isinstance(other, VariableSpace) and self.variables == other.variables
                and self.y_names == other.y_names)

    def __hash__(self):
        return hash((self.variables, self.y_names))

    def __repr__(self):
        return f"VariableSpace(x={self.x_names}, y={self.y_names})"

    def index(self, name: str) -> int:
        self[name]
        return self.names.index(name)

    @property
    def p(self) -> int:
        return len(self.y_names)

    @property
    def q(self) -> int:
        return len(self.x_names)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(v.size for v in self.variables)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def x_variables(self) -> tuple[Variable, ...]:
        return tuple(self[n] for n in self.x_names)

    def y_variables(self) -> tuple[Variable, ...]:
        return tuple(self[n] for n in self.y_names)

    def to_dict(self) -> dict:
        return {"variables": [{"name": v.name, "levels": list(v.levels)} for v in self.variables],
                "y_block": list(self.y_names)}


def build_space(names_and_levels, y_block_names: Iterable[str]) -> VariableSpace:
    """Validate a declaration and return a :class:`VariableSpace`.

    ``names_and_levels`` is a mapping ``name -> levels`` or a sequence of
    ``(name, levels)`` pairs; an integer in place of ``levels`` creates the
    levels ``"0", "1", ...``.
    """
    items = list(names_and_levels.items()) if isinstance(names_and_levels, Mapping) \
        else list(names_and_levels)
    variables, seen = [], set()
    for name, levels in items:
        name = str(name)
        if name in seen:
            raise ValidationError(f"duplicate variable name {name!r}", variable=name)
        if _indicator_target(name) is not None or name.endswith(STAR):
            raise ValidationError(f"variable name {name!r} uses a reserved pattern", variable=name)
        seen.add(name)
        if isinstance(levels, (int, np.integer)):
            levels = [str(i) for i in range(int(levels))]
        levels = tuple(str(level) for level in levels)
        if len(levels) < 2:
            raise ValidationError(f"variable {name!r} needs at least 2 levels", variable=name)
        if len(set(levels)) != len(levels):
            raise ValidationError(f"duplicate level labels in {name!r}", variable=name)
        if STAR in levels:
            raise ValidationError(f"level label '*' is reserved (variable {name!r})", variable=name)
        variables.append(Variable(name, levels))
    y_names = [str(n) for n in y_block_names]
    for n in y_names:
        if n not in seen:
            raise ValidationError(f"unknown Y-block variable {n!r}", variable=n)
    if len(set(y_names)) != len(y_names):
        raise ValidationError("duplicate names in the Y block")
    space = VariableSpace(variables, y_names)
    if space.n_cells > MAX_CELLS:
        raise ValidationError(f"space has {space.n_cells} cells; the limit is {MAX_CELLS}")
    return space


def _as_variables(space_or_vars) -> tuple[Variable, ...]:
    if isinstance(space_or_vars, VariableSpace):
        return space_or_vars.variables
    if isinstance(space_or_vars, ProbTable):
        return space_or_vars.variables
    return tuple(space_or_vars)


class ProbTable:
    """A normalized probability mass function over a tuple of variables.

    ``mass`` is a read-only array whose shape is the tuple of level counts.
    A table over zero variables is a scalar holding 1.0.
    """

    __slots__ = ("variables", "mass")

    def __init__(self, variables: Sequence[Variable], mass):
        variables = tuple(variables)
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate variables in table")
        shape = tuple(v.size for v in variables)
        arr = np.array(mass, dtype=np.float64)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(
                f"mass has {arr.size} entries but the variables define {int(np.prod(shape))} cells")
        arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("probability masses must be finite and nonnegative")
        total = math.fsum(arr.ravel())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(f"masses sum to {total!r}, not 1 within {NORMALIZATION_TOL}")
        if total != 1.0:
            arr = _normalize(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "mass", arr)

    def __setattr__(self, key, value):
        raise AttributeError("ProbTable is immutable")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mass.shape

    @property
    def flat(self) -> np.ndarray:
        return self.mass.reshape(-1)

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise ValidationError(f"unknown variable {name!r}", variable=name)

    def axis(self, name: str) -> int:
        return self.names.index(self.variable(name).name)

    def transpose(self, names: Sequence[str]) -> "ProbTable":
        names = list(names)
        if sorted(names) != sorted(self.names):
            raise ValidationError("transpose needs a permutation of the table variables")
        axes = [self.axis(n) for n in names]
        return ProbTable([self.variables[a] for a in axes], np.transpose(self.mass, axes))

    def __eq__(self, other):
        return (isinstance(other, ProbTable) and self.variables == other.variables
                and np.array_equal(self.mass, other.mass))

    def __repr__(self):
        return f"ProbTable({self.names}, shape={self.shape})"


def _normalize(arr: np.ndarray) -> np.ndarray:
    """Divide by the correctly rounded sum until the sum is exactly one.

    Reaching an exact fixed point makes renormalization idempotent.
    """
    out = np.array(arr, dtype=np.float64)
    for _ in range(4):
        total = math.fsum(out.ravel())
        if total == 1.0:
            return out
        out = out / total
    flat = out.reshape(-1)
    k = int(np.argmax(flat))
    flat[k] += 1.0 - math.fsum(flat)
    return out


def make_table(space, weights) -> ProbTable:
    """Normalize nonnegative ``weights`` into a :class:`ProbTable`."""
    variables = _as_variables(space)
    w = np.asarray(weights, dtype=np.float64)
    n = int(np.prod([v.size for v in variables], dtype=np.int64))
    if w.size != n:
        raise ValidationError(f"expected {n} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite")
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValidationError("weights are all zero")
    return ProbTable(variables, _normalize(w.reshape([v.size for v in variables])))


def _grouped_fsum(arr: np.ndarray, keep_axes: Sequence[int]) -> np.ndarray:
    """Correctly rounded sums of ``arr`` over every axis not in ``keep_axes``.

    The result keeps the axes in the order listed.
    """
    drop = [a for a in range(arr.ndim) if a not in keep_axes]
    moved = np.transpose(arr, list(keep_axes) + drop)
    keep_shape = moved.shape[:len(keep_axes)]
    rows = moved.reshape(int(np.prod(keep_shape, dtype=np.int64)), -1)
    if rows.shape[1] == 1:
        return rows[:, 0].reshape(keep_shape).copy()
    return np.fromiter((math.fsum(r) for r in rows), dtype=np.float64,
                       count=rows.shape[0]).reshape(keep_shape)


def marginalize(table: ProbTable, keep_vars: Sequence[str]) -> ProbTable:
    """Sum out every variable not in ``keep_vars``; result follows ``keep_vars`` order."""
    keep_vars = list(keep_vars)
    if len(set(keep_vars)) != len(keep_vars):
        raise ValidationError("duplicate names in keep_vars")
    axes = [table.axis(n) for n in keep_vars]
    if axes == list(range(table.mass.ndim)):
        return table
    summed = _grouped_fsum(table.mass, axes)
    return ProbTable([table.variables[a] for a in axes], _normalize(summed))


def condition(table: ProbTable, assignment: Mapping[str, object]) -> tuple[ProbTable, float]:
    """Slice ``table`` at ``assignment`` and renormalize.

    Returns the conditional table over the remaining variables and the
    marginal probability of the assignment.
    """
    if not assignment:
        raise ValidationError("assignment must fix at least one variable")
    index: list = [slice(None)] * table.mass.ndim
    for name, level in assignment.items():
        axis = table.axis(name)
        index[axis] = table.variables[axis].level_index(level)
    sliced = table.mass[tuple(index)]
    prob = math.fsum(np.ravel(sliced))
    if prob <= 0.0:
        raise ValidationError("conditioning on an event of probability zero",
                              assignment={k: str(v) for k, v in assignment.items()})
    rest = [v for v in table.variables if v.name not in assignment]
    return ProbTable(rest, _normalize(np.asarray(sliced) / prob)), prob


@dataclass(frozen=True, eq=False)
class MomentConstraint:
    """A known expectation ``E[u(Y)] = target`` of a function of a Y-subvector.

    ``values`` is a dense array over the cells of ``scope`` (row-major in
    scope order).  The levels used are the variables' declared levels.
    """

    scope: tuple[str, ...]
    values: np.ndarray
    target: float
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "scope", tuple(self.scope))
        vals = np.array(self.values, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if len(set(self.scope)) != len(self.scope):
            raise ValidationError("duplicate names in constraint scope")
        if not math.isfinite(float(self.target)):
            raise ValidationError(f"moment target must be finite ({self.name or self.scope})")
        object.__setattr__(self, "target", float(self.target))
        if not np.all(np.isfinite(vals)):
            raise ValidationError("moment function values must be finite")

    def bind(self, variables: Sequence[Variable]) -> np.ndarray:
        """Values reshaped to the scope variables' level counts."""
        by_name = {v.name: v for v in variables}
        try:
            shape = tuple(by_name[n].size for n in self.scope)
        except KeyError as exc:
            raise ValidationError(f"constraint scope variable {exc.args[0]!r} not in table",
                                  variable=exc.args[0]) from None
        if self.values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(
                f"constraint {self.name or self.scope} has {self.values.size} values, "
                f"scope needs {int(np.prod(shape))}")
        return self.values.reshape(shape)

    def is_constant(self) -> bool:
        return bool(np.ptp(self.values) == 0.0) if self.values.size else True

    def broadcast(self, variables: Sequence[Variable]) -> np.ndarray:
        """Values as a function on all cells of ``variables`` (constant off-scope)."""
        vals = self.bind(variables)
        names = [v.name for v in variables]
        order = sorted(range(len(self.scope)), key=lambda i: names.index(self.scope[i]))
        vals = np.transpose(vals, order)
        shape = [1] * len(variables)
        for i in order:
            shape[names.index(self.scope[i])] = vals.shape[order.index(i)]
        return np.broadcast_to(vals.reshape(shape), tuple(v.size for v in variables))


def indicator_constraint(variables: Sequence[Variable], cell: Sequence[int], target: float,
                         name: str = "") -> MomentConstraint:
    """Indicator of one cell over ``variables`` with a known probability."""
    shape = tuple(v.size for v in variables)
    vals = np.zeros(shape)
    vals[tuple(cell)] = 1.0
    return MomentConstraint(tuple(v.name for v in variables), vals, target, name)


def moment(table: ProbTable, constraint: MomentConstraint) -> float:
    """``sum_cells u(cell) * mass(cell)``, correctly rounded."""
    u = constraint.broadcast(table.variables)
    return math.fsum((u * table.mass).ravel())


class ObservedTable:
    """Distribution of the materialized variables ``(X*, Y*)``.

    ``mass`` has one axis per study variable of length ``levels + 1``; the
    last index on each axis is the ``"*"`` placeholder.
    """

    __slots__ = ("space", "mass")

    def __init__(self, space: VariableSpace, mass):
        arr = np.array(mass, dtype=np.float64)
        shape = tuple(v.size + 1 for v in space.variables)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError("observed mass does not match the materialized space")
        arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("observed masses must be finite and nonnegative")
        total = math.fsum(arr.ravel())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(f"observed masses sum to {total!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "mass", arr)

    def __setattr__(self, key, value):
        raise AttributeError("ObservedTable is immutable")

    @property
    def variables(self) -> tuple[Variable, ...]:
        return tuple(v.starred() for v in self.space.variables)

    def pattern_mass(self, missing: Mapping[str, bool]) -> float:
        """Mass of records whose missingness matches ``missing`` on the listed
        variables; unlisted variables are unrestricted."""
        for n in missing:
            self.space.index(n)
        idx = tuple(slice(None) if v.name not in missing
                    else (-1 if missing[v.name] else slice(0, v.size))
                    for v in self.space.variables)
        return math.fsum(np.ravel(self.mass[idx]))

    def patterns(self):
        """Yield ``(w, m, weight, table)`` per missingness pattern.

        ``w`` and ``m`` are bit tuples over the X and Y blocks, ``table``
        is the conditional distribution of the observed variables (``None``
        when the pattern has zero weight or observes nothing).
        """
        space = self.space
        for bits in itertools.product((0, 1), repeat=len(space.variables)):
            idx = tuple(-1 if b else slice(0, v.size) for b, v in zip(bits, space.variables))
            block = np.asarray(self.mass[idx])
            weight = math.fsum(np.ravel(block))
            observed = [v for b, v in zip(bits, space.variables) if not b]
            table = None
            if weight > 0 and observed:
                table = ProbTable(observed, _normalize(block / weight))
            bit = dict(zip(space.names, bits))
            w = tuple(bit[n] for n in space.x_names)
            m = tuple(bit[n] for n in space.y_names)
            yield w, m, weight, table

    def __eq__(self, other):
        return (isinstance(other, ObservedTable) and self.space == other.space
                and np.array_equal(self.mass, other.mass))


def materialize(full_table: ProbTable) -> ObservedTable:
    """Collapse a full-data table over study variables and indicators.

    Indicator variables are recognised by name (``M[y]`` for the Y block,
    ``W[x]`` for the X block); study variables without an indicator are
    treated as always observed X variables.
    """
    study, indicators = [], {}
    for axis, v in enumerate(full_table.variables):
        target = _indicator_target(v.name)
        if target is None:
            study.append(axis)
        else:
            if v.size != 2:
                raise ValidationError(f"indicator {v.name!r} must be binary")
            indicators[target[0]] = (axis, target[1])
    names = [full_table.variables[a].name for a in study]
    for n in indicators:
        if n not in names:
            raise ValidationError(f"indicator for unknown variable {n!r}")
    arr = np.asarray(full_table.mass)
    # put study axes first, indicators after in study order
    ind_axes = [indicators[n][0] for n in names if n in indicators]
    arr = np.transpose(arr, study + ind_axes)
    k = len(study)
    out = arr
    ind_pos = k
    for i, n in enumerate(names):
        if n in indicators:
            obs = np.take(out, 0, axis=ind_pos)
            mis = np.take(out, 1, axis=ind_pos).sum(axis=i, keepdims=True)
            out = np.concatenate([obs, mis], axis=i)
        else:
            pad = [(0, 0)] * out.ndim
            pad[i] = (0, 1)
            out = np.pad(out, pad)
    y_names = [n for n in names if n in indicators and indicators[n][1] == "Y"]
    space = VariableSpace([full_table.variables[a] for a in study], y_names)
    return ObservedTable(space, _normalize(out))
