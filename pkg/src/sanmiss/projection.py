"""f-divergences and f-projections onto fixed-marginal plus moment constraints.

The projection of ``Q`` onto ``{P : P has a given marginal on some
variables, E_P[u_k] = t_k}`` has density ratio
``dP/dQ = c * odds(lam^{-1}(alpha[fiber] + sum_k beta_k u_k))``.  We find
``(alpha, beta)`` by damped Newton on the strictly convex dual

    D(alpha, beta) = sum_cells Q f*(eta) - alpha . marginal - beta . targets,

after re-expressing the moment functions relative to their within-fiber
means and dropping linearly dependent ones, so the Hessian is positive
definite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import ConvergenceError, DominanceError, InfeasibleConstraintError, ValidationError
from .links import FGenerator
from .tables import MomentConstraint, ProbTable, _normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """A fixed marginal over a subset of variables plus moment constraints.

    ``fixed_marginal`` may be a table over zero variables, in which case the
    only fixed-marginal constraint is normalization.
    """

    fixed_marginal: ProbTable
    moments: tuple[MomentConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "moments", tuple(self.moments))


@dataclass(frozen=True)
class ProjectionOptions:
    tol: float = 1e-10
    max_iter: int = 200
    smoothing: bool = False
    smoothing_eps: float = 1e-9
    feasibility_check: bool = True
    init: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    table: ProbTable
    alpha: np.ndarray          # one coefficient per fixed-marginal cell (-inf on empty fibers)
    beta: np.ndarray           # one coefficient per moment (0 for redundant ones)
    residuals: dict
    divergence: float
    iterations: int
    smoothed: bool
    kept_moments: tuple[int, ...] = ()
    reduced_dual: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        alpha = [None if not np.isfinite(a) else float(a) for a in self.alpha.ravel()]
        return {
            "variables": [{"name": v.name, "levels": list(v.levels)} for v in self.table.variables],
            "mass": self.table.flat.tolist(),
            "dual": {"alpha": alpha, "beta": self.beta.tolist()},
            "residuals": dict(self.residuals),
            "divergence": self.divergence,
            "iterations": self.iterations,
            "smoothed": self.smoothed,
        }


def f_divergence(P: ProbTable, Q: ProbTable, generator: FGenerator) -> float:
    """``sum_cells f(P/Q) Q``; cells with ``Q = 0`` must have ``P = 0``."""
    if P.names != Q.names:
        P = P.transpose(Q.names)
    if P.variables != Q.variables:
        raise ValidationError("P and Q live on different spaces")
    p, q = P.flat, Q.flat
    if np.any((q == 0) & (p > 0)):
        raise DominanceError("P is not dominated by Q")
    pos = q > 0
    vals = generator.value(p[pos] / q[pos]) * q[pos]
    return math.fsum(vals)


# ---------------------------------------------------------------------------
# problem assembly


@dataclass
class _Layout:
    q: np.ndarray              # Q mass on all cells
    fiber: np.ndarray          # fiber id per cell
    fixed: np.ndarray          # fixed marginal per fiber
    U: np.ndarray              # moment functions over all cells, (k, n)
    targets: np.ndarray


def _layout(Q: ProbTable, constraints: ConstraintSet) -> _Layout:
    names = Q.names
    fm = constraints.fixed_marginal
    for v in fm.variables:
        if v.name not in names:
            raise ValidationError(f"fixed-marginal variable {v.name!r} not in Q", variable=v.name)
        if Q.variable(v.name) != v:
            raise ValidationError(f"fixed-marginal variable {v.name!r} has different levels")
    fixed_axes = [names.index(v.name) for v in fm.variables]
    grids = np.indices(Q.shape).reshape(Q.mass.ndim, -1)
    if fixed_axes:
        fiber = np.ravel_multi_index(tuple(grids[a] for a in fixed_axes), fm.shape)
    else:
        fiber = np.zeros(grids.shape[1] if grids.ndim > 1 else 1, dtype=np.int64)
    U = np.array([m.broadcast(Q.variables).ravel() for m in constraints.moments],
                 dtype=np.float64).reshape(len(constraints.moments), Q.flat.size)
    targets = np.array([m.target for m in constraints.moments], dtype=np.float64)
    return _Layout(Q.flat.copy(), fiber.astype(np.int64), fm.flat.copy(), U, targets)


class DualProblem:
    """The reduced dual objective for one projection.

    Coordinates are ``theta = (alpha_active_fibers, beta_reduced)``.  Exposed
    so the analytic derivatives can be checked independently.
    """

    def __init__(self, q, fiber, fixed, U, targets, generator: FGenerator):
        self.q = q
        self.fiber = fiber
        self.fixed = fixed
        self.U = U
        self.targets = targets
        self.generator = generator
        self.n_fib = fixed.size
        self.k = U.shape[0]

    @property
    def dim(self) -> int:
        return self.n_fib + self.k

    def eta(self, theta):
        return theta[:self.n_fib][self.fiber] + theta[self.n_fib:] @ self.U

    def objective(self, theta) -> float:
        eta = self.eta(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            val = float(self.q @ self.generator.conjugate(eta))
        return val - float(theta[:self.n_fib] @ self.fixed) - float(theta[self.n_fib:] @ self.targets)

    def gradient(self, theta, eta=None):
        eta = self.eta(theta) if eta is None else eta
        with np.errstate(over="ignore", invalid="ignore"):
            w = self.q * self.generator.ratio(eta)
        ga = np.bincount(self.fiber, weights=w, minlength=self.n_fib) - self.fixed
        gb = self.U @ w - self.targets
        return np.concatenate([ga, gb])

    def newton_direction(self, theta, g, eta=None):
        eta = self.eta(theta) if eta is None else eta
        with np.errstate(over="ignore", invalid="ignore"):
            v = self.q * self.generator.ratio_derivative(eta)
        d = np.bincount(self.fiber, weights=v, minlength=self.n_fib)
        ga, gb = g[:self.n_fib], g[self.n_fib:]
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise FloatingPointError("degenerate Hessian")
        if self.k == 0:
            return -ga / d
        Uv = self.U * v
        B = np.stack([np.bincount(self.fiber, weights=row, minlength=self.n_fib) for row in Uv],
                     axis=1)
        Hbb = Uv @ self.U.T
        S = Hbb - B.T @ (B / d[:, None])
        rhs = -gb + B.T @ (ga / d)
        try:
            db = linalg.solve(S, rhs, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            db = linalg.lstsq(S, rhs)[0]
        da = (-ga - B @ db) / d
        return np.concatenate([da, db])

    def hessian(self, theta):
        """Dense Hessian (used by tests and diagnostics only)."""
        eta = self.eta(theta)
        v = self.q * self.generator.ratio_derivative(eta)
        A = np.zeros((self.dim, self.q.size))
        A[self.fiber, np.arange(self.q.size)] = 1.0
        A[self.n_fib:] = self.U
        return (A * v) @ A.T

    def solve(self, theta0=None, tol=1e-10, max_iter=200):
        theta = np.zeros(self.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
        eta = self.eta(theta)
        g = self.gradient(theta, eta)
        obj = self.objective(theta)
        for it in range(max_iter + 1):
            gnorm = float(np.max(np.abs(g))) if g.size else 0.0
            if gnorm < tol:
                return theta, it, gnorm
            if it == max_iter:
                break
            try:
                step = self.newton_direction(theta, g, eta)
            except FloatingPointError:
                step = -g
            slope = float(g @ step)
            if not slope < 0:
                step, slope = -g, -float(g @ g)
            s = 1.0
            for _ in range(80):
                cand = theta + s * step
                cand_eta = self.eta(cand)
                cand_obj = self.objective(cand)
                if np.isfinite(cand_obj):
                    if cand_obj <= obj + 1e-4 * s * slope:
                        break
                    cand_g = self.gradient(cand, cand_eta)
                    # near the optimum the objective is flat to rounding; fall
                    # back on the gradient norm as merit
                    if np.all(np.isfinite(cand_g)) and np.max(np.abs(cand_g)) < 0.5 * gnorm \
                            and abs(cand_obj - obj) <= 1e-12 * (1.0 + abs(obj)):
                        break
                s *= 0.5
            else:
                raise ConvergenceError("line search failed in projection dual",
                                       iterations=it, residual=gnorm)
            theta, eta, obj = cand, cand_eta, cand_obj
            g = self.gradient(theta, eta)
        raise ConvergenceError(f"projection did not converge in {max_iter} iterations",
                               iterations=max_iter, residual=gnorm)


def _fiber_means(U, fiber, n_fib, active):
    counts = np.bincount(fiber[active], minlength=n_fib).astype(np.float64)
    sums = np.stack([np.bincount(fiber[active], weights=row[active], minlength=n_fib)
                     for row in U]) if U.shape[0] else np.zeros((0, n_fib))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), 0.0)
    return means  # (k, n_fib)


def _check_ranges(lay: _Layout, active, moments: Sequence[MomentConstraint], tol=1e-9):
    """Each target must lie inside [min, max] achievable given the fixed marginal."""
    n_fib = lay.fixed.size
    for i, u in enumerate(lay.U):
        lo = np.full(n_fib, np.inf)
        hi = np.full(n_fib, -np.inf)
        np.minimum.at(lo, lay.fiber[active], u[active])
        np.maximum.at(hi, lay.fiber[active], u[active])
        pos = lay.fixed > 0
        vmin = float(lay.fixed[pos] @ lo[pos])
        vmax = float(lay.fixed[pos] @ hi[pos])
        t = lay.targets[i]
        scale = tol * (1.0 + abs(t))
        name = moments[i].name or f"moment {i} over {moments[i].scope}"
        if t < vmin - scale or t > vmax + scale:
            raise InfeasibleConstraintError(
                f"target {t!r} of {name} is outside the achievable range [{vmin!r}, {vmax!r}]",
                constraint=name, target=t, low=vmin, high=vmax)


def _check_interior(q_active, fib_active, fixed, U_act, t_act, n_fib):
    """LP: is there a strictly positive P meeting every constraint?"""
    n = q_active.size
    rows_f = np.zeros((n_fib, n))
    rows_f[fib_active, np.arange(n)] = 1.0
    keep = fixed > 0
    A_eq = np.vstack([rows_f[keep], U_act]) if U_act.shape[0] else rows_f[keep]
    b_eq = np.concatenate([fixed[keep], t_act]) if U_act.shape[0] else fixed[keep]
    A_eq = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
    # P_i - s >= 0  ->  -P_i + s <= 0
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    bounds = [(0, None)] * n + [(0, 1)]
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                           bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleConstraintError("constraints are jointly infeasible given the fixed marginal")
    if res.status != 0:
        log.warning("feasibility LP ended with status %s: %s", res.status, res.message)
        return
    counts = np.bincount(fib_active, minlength=n_fib)
    floor = np.min(fixed[keep] / counts[keep])
    if res.x[-1] <= 1e-9 * floor:
        raise InfeasibleConstraintError(
            "constraints are only met by distributions with empty cells; "
            "no positive density ratio exists",
            slack=float(res.x[-1]))


def _reduce_moments(Uc, tc, tol=1e-9):
    """Select a linearly independent subset of centred moment rows.

    Returns kept indices and raises if a dropped row's target disagrees
    with the kept rows.
    """
    k = Uc.shape[0]
    if k == 0:
        return np.array([], dtype=int)
    norms = np.max(np.abs(Uc), axis=1)
    scale = max(float(np.max(norms)), 1.0)
    _, R, piv = linalg.qr(Uc.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * scale)) if diag.size else 0
    kept = np.sort(piv[:rank])
    dropped = np.sort(piv[rank:])
    if dropped.size:
        coef = linalg.lstsq(Uc[kept].T, Uc[dropped].T)[0] if rank else np.zeros((0, dropped.size))
        implied = coef.T @ tc[kept] if rank else np.zeros(dropped.size)
        bad = np.abs(implied - tc[dropped]) > 1e-8 * (1.0 + np.abs(tc[dropped]))
        if np.any(bad):
            i = int(dropped[np.argmax(bad)])
            raise InfeasibleConstraintError(
                f"moment {i} is implied by the other constraints but its target disagrees",
                constraint=i, target=float(tc[i]), implied=float(implied[np.argmax(bad)]))
    return kept


def project(Q: ProbTable, constraints: ConstraintSet, generator: FGenerator,
            options: ProjectionOptions | None = None) -> ProjectionResult:
    """f-projection of ``Q`` onto the distributions meeting ``constraints``."""
    options = options or ProjectionOptions()
    lay = _layout(Q, constraints)
    smoothed = False
    if options.smoothing and np.any(lay.q == 0):
        lay.q = _normalize(lay.q + options.smoothing_eps)
        smoothed = True
    n_fib = lay.fixed.size
    active = lay.fixed[lay.fiber] > 0
    if np.any(lay.q[active] <= 0):
        raise DominanceError("Q has empty cells where the constraints require mass; "
                             "enable smoothing to proceed")
    if options.feasibility_check:
        _check_ranges(lay, active, constraints.moments)

    # centre moments within fibers; the fiber part is pinned by the marginal
    means = _fiber_means(lay.U, lay.fiber, n_fib, active)
    Uc_full = lay.U - means[:, lay.fiber]
    tc = lay.targets - means @ lay.fixed
    kept = _reduce_moments(Uc_full[:, active], tc)
    scales = np.max(np.abs(Uc_full[kept][:, active]), axis=1) if kept.size else np.zeros(0)

    fib_ids = np.flatnonzero(lay.fixed > 0)
    remap = -np.ones(n_fib, dtype=np.int64)
    remap[fib_ids] = np.arange(fib_ids.size)
    q_act = lay.q[active]
    fib_act = remap[lay.fiber[active]]
    U_act = Uc_full[kept][:, active] / scales[:, None] if kept.size else np.zeros((0, q_act.size))
    t_act = tc[kept] / scales if kept.size else np.zeros(0)
    if options.feasibility_check:
        _check_interior(q_act, fib_act, lay.fixed[fib_ids], U_act, t_act, fib_ids.size)

    dual = DualProblem(q_act, fib_act, lay.fixed[fib_ids], U_act, t_act, generator)
    theta, iters, _ = dual.solve(options.init, tol=options.tol, max_iter=options.max_iter)
    eta = dual.eta(theta)
    ratio = generator.ratio(eta)
    p = np.zeros_like(lay.q)
    p[active] = q_act * ratio
    P = ProbTable(Q.variables, _normalize(p.reshape(Q.shape)))

    beta = np.zeros(len(constraints.moments))
    beta[kept] = theta[fib_ids.size:] / scales if kept.size else 0.0
    alpha = np.full(n_fib, -np.inf)
    alpha[fib_ids] = theta[:fib_ids.size] - (beta @ means)[fib_ids]

    marg = np.bincount(lay.fiber, weights=P.flat, minlength=n_fib)
    res_fixed = float(np.max(np.abs(marg - lay.fixed)))
    res_mom = float(np.max(np.abs(lay.U @ P.flat - lay.targets))) if lay.U.shape[0] else 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        divergence = math.fsum(ratio * eta * q_act - q_act * generator.conjugate(eta))
    return ProjectionResult(
        table=P,
        alpha=alpha.reshape(constraints.fixed_marginal.shape),
        beta=beta,
        residuals={"fixed_marginal": res_fixed, "moments": res_mom},
        divergence=float(divergence),
        iterations=iters,
        smoothed=smoothed,
        kept_moments=tuple(int(i) for i in kept),
        reduced_dual=theta,
    )


def dual_problem(Q: ProbTable, constraints: ConstraintSet, generator: FGenerator) -> DualProblem:
    """Build the reduced dual that :func:`project` minimizes (no solve)."""
    lay = _layout(Q, constraints)
    n_fib = lay.fixed.size
    active = lay.fixed[lay.fiber] > 0
    means = _fiber_means(lay.U, lay.fiber, n_fib, active)
    Uc = lay.U - means[:, lay.fiber]
    tc = lay.targets - means @ lay.fixed
    kept = _reduce_moments(Uc[:, active], tc)
    scales = np.max(np.abs(Uc[kept][:, active]), axis=1) if kept.size else np.zeros(0)
    fib_ids = np.flatnonzero(lay.fixed > 0)
    remap = -np.ones(n_fib, dtype=np.int64)
    remap[fib_ids] = np.arange(fib_ids.size)
    U_act = Uc[kept][:, active] / scales[:, None] if kept.size else np.zeros((0, int(active.sum())))
    t_act = tc[kept] / scales if kept.size else np.zeros(0)
    return DualProblem(lay.q[active], remap[lay.fiber[active]], lay.fixed[fib_ids],
                       U_act, t_act, generator)


def additive_decomposition_residual(P_star: ProbTable, Q: ProbTable, constraints: ConstraintSet,
                                    generator: FGenerator) -> float:
    """Max residual of ``f'(P*/Q)`` after regressing it on the constraint span.

    The span is the fiber indicators of the fixed marginal plus the moment
    functions, restricted to the support of ``P*``.  A projection makes
    ``f'(P*/Q)`` lie exactly in that span.
    """
    if P_star.names != Q.names:
        P_star = P_star.transpose(Q.names)
    lay = _layout(Q, constraints)
    p = P_star.flat
    if np.any((lay.q == 0) & (p > 0)):
        raise DominanceError("P* is not dominated by Q")
    sup = p > 0
    v = generator.derivative(p[sup] / lay.q[sup])
    fib = lay.fiber[sup]
    ids, inv = np.unique(fib, return_inverse=True)
    X = np.zeros((v.size, ids.size + lay.U.shape[0]))
    X[np.arange(v.size), inv] = 1.0
    if lay.U.shape[0]:
        X[:, ids.size:] = lay.U[:, sup].T
    coef = linalg.lstsq(X, v)[0]
    return float(np.max(np.abs(v - X @ coef)))
