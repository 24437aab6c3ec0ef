"""Sequentially additive nonignorable (SAN) missingness mechanisms.

For the ``j``-th Y variable in the ordering the mechanism is

    lam(P(M_j = 1 | x, y, m_<j)) = alpha_j(x, y*_<j, y_>j) + beta_j(y_>=j),

where ``y*_<j`` are the materialized earlier variables (``"*"`` when
missing) and ``beta_j`` vanishes at a baseline level of ``y_j``.  The six
submodels restrict the arguments of ``alpha_j`` and ``beta_j``.

All per-variable tables here live on a *hybrid* axis layout for step ``j``:
X variables (declared order), then the earlier Y variables materialized,
then ``Y_j`` and the later Y variables in full.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .data import MISSING, Dataset
from .errors import ConfigError, IdentificationError, InfeasibleConstraintError, ValidationError
from .links import FGenerator, get_link
from .projection import (ConstraintSet, ProjectionOptions, additive_decomposition_residual,
                         project)
from .tables import (STAR, MomentConstraint, ObservedTable, ProbTable, Variable, VariableSpace,
                     _normalize, indicator_variable, marginalize, materialize, moment)

SUBMODELS = {
    0: "full",
    1: "main_effects",
    2: "order_invariant",
    3: "direct_only",
    4: "no_direct",
    5: "ignorable",
}
ORDERING_POLICIES = ("declared", "by_missingness_desc")


@dataclass(frozen=True, eq=False)
class Term:
    """One additive piece of a linear predictor.

    ``free`` flags the coefficients that are parameters; the rest are
    pinned at zero for identification.
    """

    kind: str                     # "alpha" or "beta"
    owner: str                    # Y variable whose mechanism this belongs to
    variables: tuple[str, ...]
    starred: tuple[bool, ...]
    shape: tuple[int, ...]
    free: np.ndarray
    label: str = ""

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    @property
    def axis_names(self) -> tuple[str, ...]:
        return tuple(n + STAR if s else n for n, s in zip(self.variables, self.starred))

    def coefficient_names(self, space: VariableSpace) -> list[str]:
        head = f"{self.kind}.{self.owner}" + (f".{self.label}" if self.label else "")
        if not self.variables:
            return [head] if self.n_free else []
        out = []
        levels = [space[n].levels + ((STAR,) if s else ()) for n, s in
                  zip(self.variables, self.starred)]
        for cell in zip(*np.nonzero(self.free)):
            parts = [f"{a}={levels[k][c]}" for k, (a, c) in enumerate(zip(self.axis_names, cell))]
            out.append(f"{head}[{','.join(parts)}]")
        return out


class SanSpec:
    """Link, ordering, submodel, baselines and coefficient values.

    Parameters
    ----------
    space : VariableSpace
    link : str or Link
    submodel : int
        0 full, 1 main effects, 2 order invariant, 3 direct only,
        4 no direct dependence, 5 ignorable.
    ordering : sequence of str, optional
        Order of the modeled Y variables; defaults to the declared Y order.
        Variables listed in ``always_observed`` are removed from it and
        placed after all modeled variables.
    baselines : mapping, optional
        Baseline level (label or index) per Y variable; defaults to the
        first level.
    always_observed : sequence of str
        Y variables that are never missing.  They get no mechanism and enter
        other mechanisms unmaterialized.
    coefficients : array_like, optional
        Free coefficients, concatenated over modeled variables (in ordering)
        and their terms; zeros by default.
    """

    def __init__(self, space: VariableSpace, link="logit", submodel: int = 0, ordering=None,
                 baselines=None, always_observed=(), coefficients=None):
        if isinstance(submodel, bool) or submodel not in SUBMODELS:
            raise ConfigError(f"submodel must be one of {sorted(SUBMODELS)}, got {submodel!r}",
                              field="submodel")
        self.space = space
        self.link = get_link(link)
        self.submodel = int(submodel)
        always = tuple(always_observed)
        for n in always:
            if n not in space.y_names:
                raise ConfigError(f"always-observed variable {n!r} is not in the Y block")
        order = tuple(space.y_names) if ordering is None else tuple(ordering)
        if len(set(order)) != len(order) or any(n not in space.y_names for n in order):
            raise ConfigError(f"ordering {list(order)} is not a set of Y variables")
        modeled = tuple(n for n in order if n not in always)
        if set(modeled) | set(always) != set(space.y_names):
            raise ConfigError(f"ordering {list(order)} does not cover the Y block")
        self.ordering = modeled
        self.always_observed = always
        self.full_ordering = modeled + always
        bl = {n: 0 for n in space.y_names}
        for n, level in dict(baselines or {}).items():
            bl[n] = space[n].level_index(level)
        self.baselines = bl
        self.terms = {n: tuple(self._build_terms(n)) for n in self.ordering}
        self.n_coef = sum(t.n_free for ts in self.terms.values() for t in ts)
        coef = np.zeros(self.n_coef) if coefficients is None else \
            np.array(coefficients, dtype=np.float64).ravel()
        if coef.size != self.n_coef:
            raise ValidationError(f"expected {self.n_coef} coefficients, got {coef.size}")
        if not np.all(np.isfinite(coef)):
            raise ValidationError("coefficients must be finite")
        coef.setflags(write=False)
        self.coefficients = coef
        self._arrays = self._unpack(coef)

    # -- structure -------------------------------------------------------

    def _positions(self, owner):
        i = self.full_ordering.index(owner)
        return self.full_ordering[:i], self.full_ordering[i + 1:]

    def _term(self, kind, owner, names, starred, zero_at=None, label=""):
        shape = tuple(self.space[n].size + (1 if s else 0) for n, s in zip(names, starred))
        free = np.ones(shape, dtype=bool)
        if zero_at is not None:
            axis, level = zero_at
            idx = [slice(None)] * len(shape)
            idx[axis] = level
            free[tuple(idx)] = False
        free.setflags(write=False)
        return Term(kind, owner, tuple(names), tuple(starred), shape, free, label)

    def _build_terms(self, j):
        X = list(self.space.x_names)
        prefix, suffix = self._positions(j)
        fo = list(self.always_observed)
        base = self.baselines
        sm = self.submodel
        if sm == 0:
            names = X + list(prefix) + list(suffix)
            star = [False] * len(X) + [True] * len(prefix) + [False] * len(suffix)
            return [self._term("alpha", j, names, star),
                    self._term("beta", j, [j] + list(suffix), [False] * (1 + len(suffix)),
                               (0, base[j]))]
        if sm == 1:
            terms = [self._term("alpha", j, X, [False] * len(X))]
            for k in prefix:
                terms.append(self._term("beta", j, [k], [True], (0, self.space[k].size), k))
            terms.append(self._term("beta", j, [j], [False], (0, base[j]), j))
            for k in suffix:
                terms.append(self._term("beta", j, [k], [False], (0, base[k]), k))
            return terms
        if sm == 2:
            return [self._term("alpha", j, X + fo, [False] * (len(X) + len(fo))),
                    self._term("beta", j, [j] + fo, [False] * (1 + len(fo)), (0, base[j]))]
        if sm == 3:
            return [self._term("alpha", j, [], []),
                    self._term("beta", j, [j], [False], (0, base[j]))]
        if sm == 4:
            names = X + list(prefix) + list(suffix)
            star = [False] * len(X) + [True] * len(prefix) + [False] * len(suffix)
            return [self._term("alpha", j, names, star)]
        return [self._term("alpha", j, X + list(prefix), [False] * len(X) + [True] * len(prefix))]

    def _unpack(self, coef):
        out, pos = {}, 0
        for j in self.ordering:
            arrays = []
            for t in self.terms[j]:
                a = np.zeros(t.shape)
                a[t.free] = coef[pos:pos + t.n_free]
                pos += t.n_free
                a.setflags(write=False)
                arrays.append(a)
            out[j] = arrays
        return out

    def coefficient_names(self) -> list[str]:
        return [name for j in self.ordering for t in self.terms[j]
                for name in t.coefficient_names(self.space)]

    def coefficient_slices(self) -> dict[str, slice]:
        """Slice of the coefficient vector belonging to each modeled variable."""
        out, pos = {}, 0
        for j in self.ordering:
            k = sum(t.n_free for t in self.terms[j])
            out[j] = slice(pos, pos + k)
            pos += k
        return out

    def with_coefficients(self, coefficients) -> "SanSpec":
        return SanSpec(self.space, self.link, self.submodel, self.ordering, self.baselines,
                       self.always_observed, coefficients)

    def term_arrays(self, owner: str) -> list[np.ndarray]:
        return list(self._arrays[owner])

    # -- evaluation ------------------------------------------------------

    def hybrid_variables(self, owner: str) -> tuple[Variable, ...]:
        return hybrid_variables(self.space, self.full_ordering, owner)

    def _broadcast(self, owner, term, arr):
        hv = [v.name for v in self.hybrid_variables(owner)]
        axes = [hv.index(a) for a in term.axis_names]
        order = np.argsort(axes)
        arr = np.transpose(arr, order)
        shape = [1] * len(hv)
        for k in order:
            shape[axes[k]] = term.shape[k]
        return arr.reshape(shape)

    def eta_table(self, owner: str) -> np.ndarray:
        """Linear predictor over the hybrid cells of ``owner``'s step."""
        if owner not in self.terms:
            raise ValidationError(f"{owner!r} has no mechanism (always observed or unknown)")
        shape = tuple(v.size for v in self.hybrid_variables(owner))
        eta = np.zeros(shape)
        for t, a in zip(self.terms[owner], self._arrays[owner]):
            eta = eta + self._broadcast(owner, t, a)
        return eta

    def mechanism_table(self, owner: str) -> np.ndarray:
        """``P(M_owner = 1 | hybrid cell)``."""
        return self.link.inverse(self.eta_table(owner))

    def mechanisms(self) -> dict[str, np.ndarray]:
        return {j: self.mechanism_table(j) for j in self.ordering}

    def embed_full(self) -> "SanSpec":
        """The same mechanism expressed with submodel-0 coefficients.

        Terms not involving ``y_j`` fold into the full alpha table and the
        rest into the full beta table, without re-association of sums.
        """
        full = SanSpec(self.space, self.link, 0, self.ordering, self.baselines,
                       self.always_observed)
        coef = []
        for j in self.ordering:
            at, bt = full.terms[j]
            a_acc = np.zeros(at.shape)
            b_acc = np.zeros(bt.shape)
            for t, arr in zip(self.terms[j], self._arrays[j]):
                target, acc = (bt, "b") if j in t.variables else (at, "a")
                names = target.axis_names
                axes = [names.index(a) for a in t.axis_names]
                order = np.argsort(axes)
                shp = [1] * len(names)
                for k in order:
                    shp[axes[k]] = t.shape[k]
                piece = np.transpose(arr, order).reshape(shp)
                if acc == "a":
                    a_acc = a_acc + piece
                else:
                    b_acc = b_acc + piece
            if np.any(b_acc[~bt.free] != 0):
                raise ValidationError("beta term does not vanish at the baseline")
            coef.append(a_acc[at.free])
            coef.append(b_acc[bt.free])
        return full.with_coefficients(np.concatenate(coef) if coef else np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "link": self.link.kind,
            "submodel": self.submodel,
            "ordering": list(self.ordering),
            "always_observed": list(self.always_observed),
            "baselines": {n: self.space[n].levels[i] for n, i in self.baselines.items()},
            "coefficients": dict(zip(self.coefficient_names(), self.coefficients.tolist())),
        }


def hybrid_variables(space: VariableSpace, ordering: Sequence[str], owner: str):
    i = list(ordering).index(owner)
    out = [space[n] for n in space.x_names]
    out += [space[n].starred() for n in ordering[:i]]
    out += [space[n] for n in ordering[i:]]
    return tuple(out)


def mechanism_prob(spec: SanSpec, j, x, y, m_prefix) -> float:
    """``P(M_j = 1 | x, y, m_<j)`` for one unit.

    ``j`` is a modeled Y name or its 0-based position in the ordering.
    ``x`` and ``y`` map names to levels (labels or indices) or list levels in
    declared X / Y order; ``m_prefix`` gives the indicators of the earlier
    variables in the ordering.
    """
    if isinstance(j, (int, np.integer)):
        if not 0 <= j < len(spec.ordering):
            raise ValidationError(f"mechanism index {j} out of range")
        owner = spec.ordering[int(j)]
    else:
        owner = str(j)
        if owner not in spec.terms:
            raise ValidationError(f"{owner!r} has no mechanism")
    space = spec.space
    xs = _as_levels(space, space.x_names, x)
    ys = _as_levels(space, space.y_names, y)
    i = spec.full_ordering.index(owner)
    prefix = spec.full_ordering[:i]
    if len(m_prefix) != len(prefix):
        raise ValidationError(f"m_prefix needs {len(prefix)} entries")
    cell = {}
    cell.update(xs)
    for n, m in zip(prefix, m_prefix):
        cell[n + STAR] = space[n].size if m else ys[n]
    for n in spec.full_ordering[i:]:
        cell[n] = ys[n]
    eta = 0.0
    for t, arr in zip(spec.terms[owner], spec.term_arrays(owner)):
        eta = eta + float(arr[tuple(cell[a] for a in t.axis_names)])
    return float(spec.link.inverse(eta))


def _as_levels(space, names, values):
    if isinstance(values, Mapping):
        return {n: space[n].level_index(values[n]) for n in names}
    values = list(values)
    if len(values) != len(names):
        raise ValidationError(f"expected {len(names)} levels, got {len(values)}")
    return {n: space[n].level_index(v) for n, v in zip(names, values)}


# ---------------------------------------------------------------------------
# full-data tables


def _assemble(space: VariableSpace, ordering: Sequence[str], xy: np.ndarray,
              mechs: Mapping[str, np.ndarray]) -> ProbTable:
    """Combine ``f(x, y)`` (axes X then Y in ``ordering``) with mechanisms."""
    nx = len(space.x_names)
    p = len(ordering)
    arr = np.asarray(xy, dtype=np.float64)
    for i, owner in enumerate(ordering):
        pr = mechs.get(owner)
        if pr is None:
            arr = np.stack([arr, np.zeros_like(arr)], axis=-1)
            continue
        nd = arr.ndim

        def grid(axis):
            shape = [1] * nd
            shape[axis] = arr.shape[axis]
            return np.arange(arr.shape[axis]).reshape(shape)

        idx = [grid(a) for a in range(nx)]
        for t in range(i):
            yk = grid(nx + t)
            mk = grid(nx + p + t)
            idx.append(np.where(mk == 1, space[ordering[t]].size, yk))
        idx += [grid(nx + t) for t in range(i, p)]
        pm = np.broadcast_to(pr[tuple(idx)], arr.shape)
        arr = np.stack([arr * (1.0 - pm), arr * pm], axis=-1)
    names = list(space.x_names) + list(ordering) + [f"M[{n}]" for n in ordering]
    target = list(space.names) + [f"M[{n}]" for n in space.y_names]
    arr = np.transpose(arr, [names.index(n) for n in target])
    variables = list(space.variables) + [indicator_variable(n) for n in space.y_names]
    return ProbTable(variables, _normalize(arr))


def _to_ordering(space, table: ProbTable, ordering) -> np.ndarray:
    names = list(space.x_names) + list(ordering)
    return np.asarray(table.transpose(names).mass)


@dataclass(frozen=True, eq=False)
class FullDataModel:
    """A joint law of ``(X, Y)`` together with a SAN mechanism."""

    joint: ProbTable
    mechanism: SanSpec

    def __post_init__(self):
        if set(self.joint.names) != set(self.mechanism.space.names):
            raise ValidationError("joint table and mechanism use different spaces")

    def full_table(self) -> ProbTable:
        return assemble_full_data(self)


def assemble_full_data(model: FullDataModel) -> ProbTable:
    """``f(x, y, m)`` over (declared variables, then ``M[y]`` in Y order)."""
    spec = model.mechanism
    xy = _to_ordering(spec.space, model.joint, spec.full_ordering)
    return _assemble(spec.space, spec.full_ordering, xy, spec.mechanisms())


# ---------------------------------------------------------------------------
# identification


@dataclass(frozen=True, eq=False)
class StepDiagnostics:
    variable: str
    pi: float
    skipped: bool
    n_moments: int = 0
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    divergence: float = float("nan")
    decomposition_residual: float = float("nan")
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    smoothed: bool = False

    def to_dict(self) -> dict:
        def clean(a):
            if a is None:
                return None
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "variable": self.variable,
            "pi": self.pi,
            "skipped": self.skipped,
            "n_moments": self.n_moments,
            "iterations": self.iterations,
            "residuals": dict(self.residuals),
            "divergence": None if math.isnan(self.divergence) else self.divergence,
            "decomposition_residual": (None if math.isnan(self.decomposition_residual)
                                       else self.decomposition_residual),
            "dual": {"alpha": clean(self.alpha), "beta": clean(self.beta)},
            "smoothed": self.smoothed,
        }


@dataclass(frozen=True, eq=False)
class FullDataReconstruction:
    """Output of :func:`reconstruct_algorithm1`.

    ``mechanisms[y]`` holds ``g(M_y = 1 | hybrid cell)`` on the axes given by
    ``mechanism_variables[y]``.
    """

    joint: ProbTable
    full: ProbTable
    ordering: tuple[str, ...]
    mechanisms: dict
    mechanism_variables: dict
    steps: tuple[StepDiagnostics, ...]


def resolve_ordering(space: VariableSpace, policy="declared", fractions=None) -> tuple[str, ...]:
    """Turn an ordering policy into an explicit order of the Y variables.

    ``by_missingness_desc`` sorts by decreasing missing fraction (ties keep
    declared order); ``fractions`` maps names to missing fractions.
    """
    if isinstance(policy, str):
        if policy == "declared":
            return tuple(space.y_names)
        if policy == "by_missingness_desc":
            if fractions is None:
                raise ConfigError("by_missingness_desc needs missing fractions")
            return tuple(sorted(space.y_names, key=lambda n: -float(fractions[n])))
        raise ConfigError(f"unknown ordering policy {policy!r}; expected {ORDERING_POLICIES} "
                          "or an explicit list", field="ordering")
    order = tuple(str(n) for n in policy)
    if sorted(order) != sorted(space.y_names):
        raise ConfigError(f"ordering {list(order)} is not a permutation of the Y block",
                          field="ordering")
    return order


def observed_fractions(observed: ObservedTable) -> dict[str, float]:
    return {n: observed.pattern_mass({n: True}) for n in observed.space.names}


def _moment_matrix(space, ordering, moments):
    yvars = [space[n] for n in ordering]
    if not moments:
        return np.zeros((0,) + tuple(v.size for v in yvars)), np.zeros(0)
    for m in moments:
        for n in m.scope:
            if n not in space.y_names:
                raise ValidationError(f"moment scope variable {n!r} is not in the Y block",
                                      variable=n)
    U = np.array([np.asarray(m.broadcast(yvars), dtype=np.float64) for m in moments])
    return U, np.array([m.target for m in moments])


def _span_suffix(U, t, i, tol=1e-10):
    """Basis of span(U) restricted to functions of the axes ``i..`` (plus targets)."""
    k = U.shape[0]
    if k == 0:
        return np.zeros((0,) + U.shape[1 + i:]), np.zeros(0)
    avg_axes = tuple(range(1, 1 + i))
    Ubar = U.mean(axis=avg_axes, keepdims=True) if avg_axes else U
    D = (U - Ubar).reshape(k, -1)
    C = linalg.null_space(D.T, rcond=tol) if D.size else np.eye(k)
    if C.shape[1] == 0:
        return np.zeros((0,) + U.shape[1 + i:]), np.zeros(0)
    V = np.tensordot(C.T, Ubar, axes=1).reshape((C.shape[1],) + U.shape[1 + i:])
    return V, C.T @ t


def reconstruct_algorithm1(observed: ObservedTable, moments: Sequence[MomentConstraint],
                           link="logit", ordering=None,
                           options: ProjectionOptions | None = None,
                           require_moments: bool = True) -> FullDataReconstruction:
    """Rebuild a full-data law with SAN mechanism from observed data and margins.

    Works backwards over the ordering.  At step ``j`` the current law of
    ``(X, Y*_<j, Y*_j, Y_>j)`` is split by ``M_j``; the law of the missing
    part is the projection of the observed part onto the fibers of
    ``(X, Y*_<j, Y_>j)`` given ``M_j = 1`` and the moments of functions of
    ``Y_>=j`` implied by the margins.
    """
    space = observed.space
    link = get_link(link)
    order = resolve_ordering(space, "declared" if ordering is None else ordering,
                             observed_fractions(observed))
    nx = len(space.x_names)
    mass = np.asarray(observed.mass)
    names = list(space.names)
    mass = np.transpose(mass, [names.index(n) for n in list(space.x_names) + list(order)])
    for a in range(nx):
        if math.fsum(np.take(mass, -1, axis=a).ravel()) > 0:
            raise ValidationError(f"X variable {space.x_names[a]!r} has missing values; "
                                  "reconstruction needs X fully observed",
                                  variable=space.x_names[a])
    state = mass[(slice(0, -1),) * nx]
    U, t = _moment_matrix(space, order, list(moments))
    p = len(order)
    mechs, mech_vars, steps = {}, {}, []
    for i in range(p - 1, -1, -1):
        owner = order[i]
        K = space[owner].size
        ax = nx + i
        miss = np.take(state, K, axis=ax)
        obs = np.take(state, np.arange(K), axis=ax)
        pi = math.fsum(miss.ravel())
        hv = hybrid_variables(space, order, owner)
        if pi == 0.0:
            state = obs
            steps.append(StepDiagnostics(owner, 0.0, True))
            continue
        if math.fsum(obs.ravel()) <= 0.0:
            raise IdentificationError(f"variable {owner!r} is never observed", variable=owner)
        V, tv = _span_suffix(U, t, i)
        # drop the y_j-free part check: Def.-4 style requirement
        varies = V.shape[0] > 0 and np.any(
            np.abs(V - V.mean(axis=1, keepdims=True)) > 1e-12 * max(1.0, np.max(np.abs(V))))
        if require_moments and not varies:
            raise IdentificationError(
                f"no auxiliary moment depends on {owner!r} through functions of "
                f"{list(order[i:])}", variable=owner)
        # step b targets
        suffix_axes = tuple(range(nx + i, nx + p))
        g_suffix_obs = obs.sum(axis=tuple(a for a in range(obs.ndim) if a not in suffix_axes))
        cons = []
        for r in range(V.shape[0]):
            tgt = (tv[r] - math.fsum((V[r] * g_suffix_obs).ravel())) / pi
            cons.append(MomentConstraint(tuple(order[i:]), V[r], tgt, name=f"{owner}:u{r}"))
        fixed_vars = hv[:ax] + hv[ax + 1:]
        fixed = ProbTable(fixed_vars, _normalize(miss))
        Q = ProbTable(hv, _normalize(obs))
        gen = FGenerator.from_pi(link, pi)
        cset = ConstraintSet(fixed, tuple(cons))
        try:
            res = project(Q, cset, gen, options)
        except InfeasibleConstraintError as exc:
            raise InfeasibleConstraintError(
                f"step for {owner!r}: {exc}", variable=owner, **exc.detail) from exc
        resid = additive_decomposition_residual(res.table, Q, cset, gen)
        pstar = np.asarray(res.table.mass) * pi
        mixed = obs + pstar
        with np.errstate(invalid="ignore", divide="ignore"):
            mech = np.where(mixed > 0, pstar / np.where(mixed > 0, mixed, 1.0), 0.0)
        mechs[owner] = mech
        mech_vars[owner] = hv
        steps.append(StepDiagnostics(owner, pi, False, len(cons), res.iterations,
                                     res.residuals, res.divergence, resid, res.alpha, res.beta,
                                     res.smoothed))
        state = mixed
    state = _normalize(state)
    names_ord = list(space.x_names) + list(order)
    joint = ProbTable([space[n] for n in names_ord], state).transpose(space.names)
    full = _assemble(space, order, state, mechs)
    return FullDataReconstruction(joint, full, tuple(order), mechs, mech_vars,
                                  tuple(reversed(steps)))


@dataclass(frozen=True)
class EquivalenceReport:
    max_obs_gap: float
    max_moment_gap: float


def observational_equivalence(gA: ProbTable, gB: ProbTable,
                              moments: Sequence[MomentConstraint] = ()) -> EquivalenceReport:
    """Sup-norm gaps between implied observed tables and between moments."""
    if gB.names != gA.names:
        try:
            gB = gB.transpose(gA.names)
        except ValidationError:
            raise ValidationError("tables live on different spaces") from None
    if gA.variables != gB.variables:
        raise ValidationError("tables live on different spaces")
    oa, ob = materialize(gA), materialize(gB)
    obs_gap = float(np.max(np.abs(oa.mass - ob.mass)))
    mom_gap = 0.0
    if moments:
        ya = [n for n in oa.space.y_names]
        ma, mb = marginalize(gA, ya), marginalize(gB, ya)
        mom_gap = max(abs(moment(ma, m) - moment(mb, m)) for m in moments)
    return EquivalenceReport(obs_gap, float(mom_gap))


# ---------------------------------------------------------------------------
# simulation and random truths


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used throughout (Philox)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def simulate(model: FullDataModel, n: int, seed, x_missing_rate=None) -> Dataset:
    """Draw ``n`` materialized records from ``model``.

    ``x_missing_rate`` optionally maps X names to a completely-at-random
    missing rate for that variable.
    """
    if int(n) < 1:
        raise ValidationError("n must be at least 1")
    n = int(n)
    rng = make_rng(seed)
    spec = model.mechanism
    space = spec.space
    joint = model.joint.transpose(space.names)
    cum = np.cumsum(joint.flat)
    draw = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    draw = np.minimum(draw, cum.size - 1)
    codes = np.stack(np.unravel_index(draw, joint.shape), axis=1).astype(np.int64)
    col = {nm: k for k, nm in enumerate(space.names)}
    missing = np.zeros_like(codes, dtype=bool)
    for owner in spec.ordering:
        table = spec.mechanism_table(owner)
        i = spec.full_ordering.index(owner)
        idx = [codes[:, col[nm]] for nm in space.x_names]
        for k in spec.full_ordering[:i]:
            idx.append(np.where(missing[:, col[k]], space[k].size, codes[:, col[k]]))
        idx += [codes[:, col[k]] for k in spec.full_ordering[i:]]
        pr = table[tuple(idx)]
        missing[:, col[owner]] = rng.random(n) < pr
    for nm, rate in dict(x_missing_rate or {}).items():
        if nm not in space.x_names:
            raise ValidationError(f"{nm!r} is not an X variable")
        missing[:, col[nm]] = rng.random(n) < float(rate)
    codes[missing] = MISSING
    return Dataset(space, codes)


def random_joint(space: VariableSpace, rng, floor: float = 0.2) -> ProbTable:
    """A strictly positive random law over the space."""
    rng = make_rng(rng)
    w = rng.uniform(floor, 1.0, size=space.shape)
    return ProbTable(space.variables, _normalize(w))


def random_san_spec(space, submodel, link="logit", rng=0, scale=1.0, ordering=None,
                    always_observed=()) -> SanSpec:
    rng = make_rng(rng)
    base = SanSpec(space, link, submodel, ordering, None, always_observed)
    return base.with_coefficients(rng.normal(0.0, scale, size=base.n_coef))


def joint_indicator_moments(table: ProbTable, names: Sequence[str] | None = None):
    """All cell-indicator constraints of a table's marginal over ``names``."""
    names = list(table.names if names is None else names)
    marg = marginalize(table, names)
    out = []
    for cell in np.ndindex(*marg.shape):
        vals = np.zeros(marg.shape)
        vals[cell] = 1.0
        label = ",".join(f"{n}={marg.variables[k].levels[c]}" for k, (n, c) in
                         enumerate(zip(names, cell)))
        out.append(MomentConstraint(tuple(names), vals, float(marg.mass[cell]), name=label))
    return out
