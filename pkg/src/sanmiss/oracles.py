"""Slow, independent reference solvers used to cross-check :func:`project`.

Neither routine shares code with the dual solver: the primal oracle works
directly on cell masses inside the affine constraint set, and the KL oracle
alternates exact one-constraint I-projections.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg, optimize

from .errors import ConvergenceError, DominanceError, InfeasibleConstraintError, ValidationError
from .links import FGenerator
from .tables import ProbTable, _normalize
from .projection import ConstraintSet

MAX_ORACLE_CELLS = 64


def _constraint_matrix(Q: ProbTable, constraints: ConstraintSet):
    fm = constraints.fixed_marginal
    n = Q.flat.size
    names = Q.names
    rows, rhs = [], []
    grid = np.indices(Q.shape).reshape(len(names), n) if names else np.zeros((0, 1), int)
    if fm.variables:
        axes = [names.index(v.name) for v in fm.variables]
        fiber = np.ravel_multi_index(tuple(grid[a] for a in axes), fm.shape)
    else:
        fiber = np.zeros(n, dtype=int)
    for a, mass in enumerate(fm.flat):
        rows.append((fiber == a).astype(np.float64))
        rhs.append(mass)
    for m in constraints.moments:
        rows.append(m.broadcast(Q.variables).ravel().astype(np.float64))
        rhs.append(m.target)
    return np.array(rows), np.array(rhs), fiber


def _lp_point(A, b, rng=None):
    """A feasible point maximizing the smallest cell, with an optional random tie-break."""
    n = A.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    if rng is not None:
        c[:n] = 1e-3 * rng.standard_normal(n)
    A_eq = np.hstack([A, np.zeros((A.shape[0], 1))])
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b,
                           bounds=[(0, None)] * n + [(0, 1)], method="highs")
    if res.status != 0:
        raise InfeasibleConstraintError("linear feasibility check failed", status=int(res.status))
    if res.x[-1] <= 1e-12:
        raise InfeasibleConstraintError("constraint set has no strictly positive member")
    return res.x[:n], res.x[-1]


def project_oracle(Q: ProbTable, constraints: ConstraintSet, generator: FGenerator,
                   n_starts: int = 3, seed: int = 0, tol: float = 1e-13,
                   max_iter: int = 500) -> ProbTable:
    """Minimize ``I_f(P, Q)`` over the feasible polytope by primal Newton.

    Iterates stay strictly inside the polytope.  Directions are Newton steps
    restricted to the null space of the constraint matrix; step lengths
    solve the one-dimensional optimality condition exactly.  Several
    feasible starting points are tried and the lowest divergence kept.
    """
    q_all = Q.flat
    if q_all.size > MAX_ORACLE_CELLS:
        raise ValidationError(f"oracle limited to {MAX_ORACLE_CELLS} cells")
    A_all, b, fiber = _constraint_matrix(Q, constraints)
    # cells in empty fibers are pinned at zero
    live = constraints.fixed_marginal.flat[fiber] > 0
    if np.any(q_all[live] <= 0):
        raise DominanceError("Q vanishes where the constraints need mass")
    A = A_all[:, live]
    q = q_all[live]
    N = linalg.null_space(A)
    rng = np.random.default_rng(seed)
    centre, _ = _lp_point(A, b)

    best, best_val = None, np.inf
    for s in range(n_starts):
        if s == 0:
            p = centre.copy()
        else:
            vertexish, _ = _lp_point(A, b, rng)
            w = rng.uniform(0.2, 0.8)
            p = w * centre + (1 - w) * vertexish
        p = _newton_primal(p, q, N, generator, tol, max_iter)
        val = float(np.sum(generator.value(p / q) * q))
        if val < best_val:
            best, best_val = p, val
    out = np.zeros_like(q_all)
    out[live] = best
    return ProbTable(Q.variables, _normalize(out.reshape(Q.shape)))


def _newton_primal(p, q, N, gen, tol, max_iter):
    if N.shape[1] == 0:
        return p
    for _ in range(max_iter):
        g = gen.derivative(p / q)
        h = gen.second_derivative(p / q) / q
        gr = N.T @ g
        if np.max(np.abs(gr)) < tol:
            return p
        H = (N.T * h) @ N
        d = N @ linalg.solve(H, -gr, assume_a="pos")
        neg = d < 0
        tmax = np.min(-p[neg] / d[neg]) if np.any(neg) else np.inf

        def slope(t):
            return float(d @ gen.derivative((p + t * d) / q))

        hi = min(1.0, 0.999999 * tmax) if np.isfinite(tmax) else 1.0
        while np.isfinite(tmax) is False and slope(hi) < 0:
            hi *= 2.0
        if slope(hi) <= 0:
            t = hi
        else:
            t = optimize.brentq(slope, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                                maxiter=500)
        step = t * d
        p = p + step
        if np.max(np.abs(step)) < 1e-17:
            return p
    raise ConvergenceError("primal oracle did not converge")


def kl_iterative_scaling(Q: ProbTable, constraints: ConstraintSet, tol: float = 1e-14,
                         max_cycles: int = 200000) -> ProbTable:
    """KL I-projection by cyclic exact projections.

    Each cycle rescales fibers to the fixed marginal, then applies for each
    moment the exponential tilt that hits its target exactly.
    """
    A, b, fiber = _constraint_matrix(Q, constraints)
    fixed = constraints.fixed_marginal.flat
    p = Q.flat.astype(np.float64).copy()
    p[fixed[fiber] == 0] = 0.0
    moments = [m.broadcast(Q.variables).ravel() for m in constraints.moments]
    targets = [m.target for m in constraints.moments]
    n_fib = fixed.size
    for _ in range(max_cycles):
        prev = p.copy()
        sums = np.bincount(fiber, weights=p, minlength=n_fib)
        scale = np.divide(fixed, sums, out=np.zeros_like(fixed), where=sums > 0)
        p = p * scale[fiber]
        for u, t in zip(moments, targets):
            p = _tilt(p, u, t)
        if np.max(np.abs(p - prev)) < tol:
            break
    else:
        raise ConvergenceError("iterative scaling did not converge")
    return ProbTable(Q.variables, _normalize(p.reshape(Q.shape)))


def _tilt(p, u, t):
    sup = p > 0
    us = u[sup]
    lo, hi = us.min(), us.max()
    if hi - lo < 1e-15:
        return p
    if not lo - 1e-12 <= t <= hi + 1e-12:
        raise InfeasibleConstraintError("moment target outside the support range")
    logp = np.log(p[sup])
    centre = 0.5 * (lo + hi)

    def mean_at(tau):
        w = logp + tau * (us - centre)
        w = np.exp(w - w.max())
        return float(w @ us / w.sum()) - t

    a, bnd = -1.0, 1.0
    while mean_at(a) > 0:
        a *= 2.0
    while mean_at(bnd) < 0:
        bnd *= 2.0
    tau = optimize.brentq(mean_at, a, bnd, xtol=1e-16, rtol=4 * np.finfo(float).eps)
    w = logp + tau * (us - centre)
    w = np.exp(w - w.max())
    out = np.zeros_like(p)
    out[sup] = w / w.sum()
    return out
