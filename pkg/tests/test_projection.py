import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fixtures import perturb, random_projection_instance, random_table, span_deficit
from sanmiss.errors import DominanceError, InfeasibleConstraintError
from sanmiss.links import LINKS, FGenerator, f_lambda, get_link
from sanmiss.oracles import kl_iterative_scaling, project_oracle
from sanmiss.projection import (ConstraintSet, ProjectionOptions,
                                additive_decomposition_residual, dual_problem, f_divergence,
                                project)
from sanmiss.tables import (MomentConstraint, ProbTable, build_space, make_table, marginalize,
                            moment)

LOGIT1 = FGenerator(get_link("logit"), 1.0)


def xy():
    return build_space([("X", 2), ("Y", 2)], ["Y"]).variables


def frozen_problem():
    Q = make_table(xy(), [1, 1, 1, 1])
    fixed = ProbTable(xy()[:1], [0.7, 0.3])
    mom = MomentConstraint(("Y",), [0.0, 1.0], 0.6)
    return Q, ConstraintSet(fixed, (mom,))


def own_constraints(Q, rng):
    fixed = marginalize(Q, [Q.names[0]])
    vals = rng.normal(size=Q.shape[-1])
    c = MomentConstraint((Q.names[-1],), vals, 0.0)
    return ConstraintSet(fixed, (MomentConstraint(c.scope, vals, moment(Q, c)),))


class TestFDivergence:
    def test_self_divergence(self):
        rng = np.random.default_rng(0)
        P = random_table(xy(), rng)
        for kind in LINKS:
            gen = FGenerator(get_link(kind), 0.7)
            assert f_divergence(P, P, gen) == pytest.approx(f_lambda(gen, 1.0), abs=1e-12)

    def test_frozen_value(self):
        y = build_space([("Y", 2)], ["Y"]).variables
        P = ProbTable(y, [0.5, 0.5])
        Q = ProbTable(y, [0.25, 0.75])
        # f(1) + KL(P||Q) = -1 + 0.5 log(4/3)
        assert f_divergence(P, Q, LOGIT1) == pytest.approx(-0.8561589637741095, abs=1e-14)

    def test_not_dominated(self):
        y = build_space([("Y", 2)], ["Y"]).variables
        with pytest.raises(DominanceError):
            f_divergence(ProbTable(y, [0.5, 0.5]), ProbTable(y, [1.0, 0.0]), LOGIT1)


class TestProject:
    def test_frozen_example(self):
        Q, cons = frozen_problem()
        res = project(Q, cons, LOGIT1)
        np.testing.assert_allclose(res.table.flat, [0.28, 0.42, 0.12, 0.18], atol=1e-12)
        assert res.residuals["fixed_marginal"] < 1e-12
        assert res.residuals["moments"] < 1e-12

    @pytest.mark.parametrize("kind", LINKS)
    def test_own_statistics_return_q(self, kind):
        rng = np.random.default_rng(3)
        Q = random_table(build_space([("a", 3), ("b", 2)], ["b"]).variables, rng)
        gen = FGenerator.from_pi(kind, 0.3)
        res = project(Q, own_constraints(Q, rng), gen)
        np.testing.assert_allclose(res.table.mass, Q.mass, atol=1e-12)
        assert res.divergence == pytest.approx(f_lambda(gen, 1.0), abs=1e-9)

    @pytest.mark.parametrize("kind", LINKS)
    def test_divergence_reported(self, kind):
        rng = np.random.default_rng(4)
        Q, cons, _ = random_projection_instance(rng)
        gen = FGenerator.from_pi(kind, 0.4)
        res = project(Q, cons, gen)
        assert res.divergence == pytest.approx(f_divergence(res.table, Q, gen), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_2x3_matches_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        variables = build_space([("a", 2), ("b", 3)], ["b"]).variables
        Q, P0 = random_table(variables, rng), random_table(variables, rng)
        u = rng.normal(size=3)
        c = MomentConstraint(("b",), u, 0.0)
        cons = ConstraintSet(marginalize(P0, ["a"]), (MomentConstraint(("b",), u,
                                                                       moment(P0, c)),))
        gen = FGenerator.from_pi(LINKS[seed % 3], 0.35)
        P = project(Q, cons, gen).table
        np.testing.assert_allclose(P.mass, project_oracle(Q, cons, gen).mass, rtol=0,
                                   atol=1e-8)

    def test_minimal_among_feasible_points(self):
        rng = np.random.default_rng(8)
        variables = build_space([("a", 2), ("b", 3)], ["b"]).variables
        Q, P0 = random_table(variables, rng), random_table(variables, rng)
        u = rng.normal(size=3)
        c = MomentConstraint(("b",), u, 0.0)
        cons = ConstraintSet(marginalize(P0, ["a"]), (MomentConstraint(("b",), u,
                                                                       moment(P0, c)),))
        for kind in LINKS:
            gen = FGenerator.from_pi(kind, 0.6)
            P = project(Q, cons, gen).table
            # mixtures of P* and P0 are feasible; none beats P*
            for w in (0.1, 0.5, 1.0):
                mix = make_table(variables, (1 - w) * P.mass + w * P0.mass)
                assert f_divergence(P, Q, gen) <= f_divergence(mix, Q, gen) + 1e-12

    def test_unique_from_different_starts(self):
        rng = np.random.default_rng(9)
        Q, cons, gen = random_projection_instance(rng, link="probit")
        base = project(Q, cons, gen)
        dim = base.reduced_dual.size
        for _ in range(3):
            init = rng.normal(scale=0.5, size=dim)
            other = project(Q, cons, gen, ProjectionOptions(init=init))
            np.testing.assert_allclose(other.table.mass, base.table.mass, atol=1e-10)

    def test_redundant_moment_dropped(self):
        Q, cons = frozen_problem()
        dup = cons.moments[0]
        scaled = MomentConstraint(dup.scope, 2 * dup.values, 2 * dup.target)
        res = project(Q, ConstraintSet(cons.fixed_marginal, (dup, scaled)), LOGIT1)
        np.testing.assert_allclose(res.table.flat, [0.28, 0.42, 0.12, 0.18], atol=1e-12)
        assert len(res.kept_moments) == 1

    def test_inconsistent_duplicate_is_infeasible(self):
        Q, cons = frozen_problem()
        dup = cons.moments[0]
        bad = MomentConstraint(dup.scope, dup.values, 0.5)
        with pytest.raises(InfeasibleConstraintError):
            project(Q, ConstraintSet(cons.fixed_marginal, (dup, bad)), LOGIT1)

    @pytest.mark.parametrize("target", [2.0, -0.1, 1.0])
    def test_out_of_range_target(self, target):
        # boundary targets force zero cells and are rejected as well
        Q, cons = frozen_problem()
        bad = MomentConstraint(("Y",), [0.0, 1.0], target)
        with pytest.raises(InfeasibleConstraintError):
            project(Q, ConstraintSet(cons.fixed_marginal, (bad,)), LOGIT1)
        with pytest.raises(InfeasibleConstraintError):
            project_oracle(Q, ConstraintSet(cons.fixed_marginal, (bad,)), LOGIT1)

    def test_zero_cell_needs_smoothing(self):
        Q = make_table(xy(), [1, 0, 1, 1])
        _, cons = frozen_problem()
        with pytest.raises(DominanceError):
            project(Q, cons, LOGIT1)
        res = project(Q, cons, LOGIT1, ProjectionOptions(smoothing=True))
        assert res.smoothed
        assert res.residuals["moments"] < 1e-9

    def test_empty_fiber_excluded(self):
        Q = make_table(xy(), [1, 2, 3, 4])
        fixed = ProbTable(xy()[:1], [1.0, 0.0])
        res = project(Q, ConstraintSet(fixed, ()), LOGIT1)
        np.testing.assert_allclose(res.table.flat, [1 / 3, 2 / 3, 0, 0], atol=1e-15)
        assert res.alpha[1] == -np.inf

    def test_to_dict(self):
        Q, cons = frozen_problem()
        d = project(Q, cons, LOGIT1).to_dict()
        assert set(d) >= {"mass", "dual", "residuals", "divergence", "iterations"}


class TestOracles:
    def test_oracle_self_statistics(self):
        rng = np.random.default_rng(11)
        Q = random_table(build_space([("a", 3), ("b", 2)], ["b"]).variables, rng)
        P = project_oracle(Q, own_constraints(Q, rng), LOGIT1)
        np.testing.assert_allclose(P.mass, Q.mass, atol=1e-12)

    def test_iterative_scaling_frozen(self):
        Q, cons = frozen_problem()
        P = kl_iterative_scaling(Q, cons)
        np.testing.assert_allclose(P.flat, [0.28, 0.42, 0.12, 0.18], atol=1e-13)

    @pytest.mark.parametrize("pi", [0.1, 0.5, 0.9])
    def test_logit_independent_of_c(self, pi):
        rng = np.random.default_rng(12)
        Q, cons, _ = random_projection_instance(rng)
        P = project(Q, cons, FGenerator.from_pi("logit", pi)).table
        np.testing.assert_allclose(P.mass, kl_iterative_scaling(Q, cons).mass, atol=1e-10)


class TestDecompositionResidual:
    def test_projection_passes(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            Q, cons, gen = random_projection_instance(rng)
            P = project(Q, cons, gen).table
            assert additive_decomposition_residual(P, Q, cons, gen) < 1e-6

    def test_q_itself_is_zero(self):
        rng = np.random.default_rng(14)
        Q = random_table(build_space([("a", 3), ("b", 2)], ["b"]).variables, rng)
        cons = own_constraints(Q, rng)
        assert additive_decomposition_residual(Q, Q, cons, LOGIT1) < 1e-13

    def test_perturbation_detected(self):
        rng = np.random.default_rng(15)
        Q = random_table(build_space([("a", 3), ("b", 3)], ["b"]).variables, rng)
        cons = own_constraints(Q, rng)
        assert span_deficit(Q, cons) > 0
        gen = FGenerator.from_pi("probit", 0.5)
        P = project(Q, cons, gen).table
        bad = perturb(P, rng, 0.05)
        assert additive_decomposition_residual(bad, Q, cons, gen) > 1e-3


class TestDual:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_gradient_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        Q, cons, gen = random_projection_instance(rng)
        dual = dual_problem(Q, cons, gen)
        theta = rng.normal(scale=0.3, size=dual.dim)
        g = dual.gradient(theta)
        h = 1e-6
        fd = np.array([(dual.objective(theta + h * e) - dual.objective(theta - h * e)) / (2 * h)
                       for e in np.eye(dual.dim)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_hessian_finite_differences(self):
        rng = np.random.default_rng(16)
        Q, cons, gen = random_projection_instance(rng, link="cloglog")
        dual = dual_problem(Q, cons, gen)
        theta = rng.normal(scale=0.3, size=dual.dim)
        h = 1e-6
        fd = np.array([(dual.gradient(theta + h * e) - dual.gradient(theta - h * e)) / (2 * h)
                       for e in np.eye(dual.dim)])
        np.testing.assert_allclose(dual.hessian(theta), fd, rtol=1e-5, atol=1e-7)

    def test_newton_direction_solves_hessian_system(self):
        rng = np.random.default_rng(17)
        Q, cons, gen = random_projection_instance(rng)
        dual = dual_problem(Q, cons, gen)
        theta = rng.normal(scale=0.3, size=dual.dim)
        g = dual.gradient(theta)
        d = dual.newton_direction(theta, g)
        np.testing.assert_allclose(dual.hessian(theta) @ d, -g, atol=1e-9)

    def test_solution_has_zero_gradient(self):
        Q, cons = frozen_problem()
        res = project(Q, cons, LOGIT1)
        dual = dual_problem(Q, cons, LOGIT1)
        assert np.max(np.abs(dual.gradient(res.reduced_dual))) < 1e-10
        assert math.isfinite(dual.objective(res.reduced_dual))
