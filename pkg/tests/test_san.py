import itertools
import math

import numpy as np
import pytest

from _fixtures import random_san_truth
from sanmiss.data import MISSING
from sanmiss.errors import (ConfigError, IdentificationError, InfeasibleConstraintError,
                            ValidationError)
from sanmiss.san import (SUBMODELS, FullDataModel, SanSpec, assemble_full_data,
                         joint_indicator_moments, make_rng, mechanism_prob,
                         observational_equivalence, random_joint, random_san_spec,
                         reconstruct_algorithm1, resolve_ordering, simulate)
from sanmiss.tables import (MomentConstraint, ObservedTable, build_space, make_table,
                            marginalize, materialize, moment)


def space_p2():
    return build_space([("x", 2), ("y1", 2), ("y2", 3)], ["y1", "y2"])


def enumerate_full(model):
    """f(x, y, m) by looping over every cell and calling mechanism_prob."""
    spec = model.mechanism
    space = spec.space
    joint = model.joint.transpose(space.names)
    out = np.zeros(joint.shape + (2,) * space.p)
    ys = list(space.y_names)
    for cell in np.ndindex(*joint.shape):
        levels = dict(zip(space.names, cell))
        x = [levels[n] for n in space.x_names]
        y = [levels[n] for n in ys]
        for m in itertools.product((0, 1), repeat=space.p):
            mm = dict(zip(ys, m))
            pr = joint.mass[cell]
            for i, owner in enumerate(spec.full_ordering):
                if owner in spec.always_observed:
                    q = 0.0
                else:
                    q = mechanism_prob(spec, owner, x, y,
                                       [mm[k] for k in spec.full_ordering[:i]])
                pr *= q if mm[owner] else 1.0 - q
            out[cell + m] = pr
    return out


class TestSanSpec:
    def test_submodel_range(self):
        with pytest.raises(ConfigError):
            SanSpec(space_p2(), submodel=6)

    def test_coefficient_count_and_names(self):
        spec = SanSpec(space_p2(), "logit", 3)
        # one intercept and (levels - 1) beta cells per variable
        assert spec.n_coef == 2 + 3
        assert spec.coefficient_names()[:2] == ["alpha.y1", "beta.y1[y1=1]"]

    def test_names_stable(self):
        a = SanSpec(space_p2(), "logit", 0).coefficient_names()
        b = SanSpec(space_p2(), "probit", 0).coefficient_names()
        assert a == b and len(set(a)) == len(a)

    def test_ordering_and_always_observed(self):
        spec = SanSpec(space_p2(), "logit", 1, ["y2", "y1"], always_observed=["y2"])
        assert spec.ordering == ("y1",)
        assert spec.full_ordering == ("y1", "y2")
        with pytest.raises(ConfigError):
            SanSpec(space_p2(), ordering=["y1", "y1"])

    def test_baseline_cells_pinned(self):
        spec = SanSpec(space_p2(), "logit", 0, baselines={"y2": "2"})
        beta = spec.terms["y2"][1]
        assert not beta.free[2].any() and beta.free[:2].all()

    def test_resolve_ordering(self):
        space = space_p2()
        assert resolve_ordering(space, "by_missingness_desc", {"y1": 0.1, "y2": 0.3}) == \
            ("y2", "y1")
        with pytest.raises(ConfigError):
            resolve_ordering(space, "alphabetical")


class TestMechanismProb:
    def test_zero_coefficients(self):
        spec = SanSpec(space_p2(), "logit", 0)
        for y1, y2, m in itertools.product(range(2), range(3), range(2)):
            assert mechanism_prob(spec, "y2", [0], [y1, y2], [m]) == 0.5

    def test_frozen_submodel3(self):
        spec = SanSpec(space_p2(), "logit", 3)
        coef = np.zeros(spec.n_coef)
        coef[0] = 1.0                       # alpha.y1
        spec = spec.with_coefficients(coef)
        assert mechanism_prob(spec, 0, [0], [0, 1], []) == pytest.approx(0.7310585786300049,
                                                                        abs=1e-15)

    def test_missing_earlier_value_is_ignored(self):
        rng = make_rng(1)
        for sm in SUBMODELS:
            spec = random_san_spec(space_p2(), sm, "probit", rng)
            a = mechanism_prob(spec, "y2", [1], [0, 2], [1])
            b = mechanism_prob(spec, "y2", [1], [1, 2], [1])
            assert a == b

    def test_observed_earlier_value_matters_submodel0(self):
        spec = random_san_spec(space_p2(), 0, "logit", make_rng(2))
        assert mechanism_prob(spec, "y2", [1], [0, 2], [0]) != \
            mechanism_prob(spec, "y2", [1], [1, 2], [0])


class TestAssemble:
    def test_ignorable_zero_is_symmetric(self):
        space = space_p2()
        model = FullDataModel(random_joint(space, make_rng(3)), SanSpec(space, "logit", 5))
        full = assemble_full_data(model)
        for m in itertools.product((0, 1), repeat=2):
            np.testing.assert_allclose(full.mass[(...,) + m], model.joint.mass / 4, atol=1e-16)

    @pytest.mark.parametrize("sm", sorted(SUBMODELS))
    def test_matches_enumeration(self, sm):
        rng = make_rng(10 + sm)
        space = space_p2()
        spec = random_san_spec(space, sm, "cloglog", rng, ordering=["y2", "y1"])
        model = FullDataModel(random_joint(space, rng), spec)
        np.testing.assert_allclose(assemble_full_data(model).mass, enumerate_full(model),
                                   atol=1e-15)

    def test_p1_enumeration(self):
        space = build_space([("x", 2), ("y", 3)], ["y"])
        rng = make_rng(4)
        spec = random_san_spec(space, 0, "logit", rng)
        model = FullDataModel(random_joint(space, rng), spec)
        full = assemble_full_data(model)
        for x, y in itertools.product(range(2), range(3)):
            q = mechanism_prob(spec, "y", [x], [y], [])
            assert full.mass[x, y, 1] == pytest.approx(model.joint.mass[x, y] * q, abs=1e-16)
        assert math.fsum(full.flat) == 1.0

    def test_always_observed_has_no_missing_mass(self):
        space = space_p2()
        spec = random_san_spec(space, 1, "logit", make_rng(5), always_observed=["y1"])
        full = FullDataModel(random_joint(space, make_rng(6)), spec).full_table()
        assert float(marginalize(full, ["M[y1]"]).mass[1]) == 0.0

    def test_embed_full_is_exact(self):
        space = space_p2()
        for sm in SUBMODELS:
            spec = random_san_spec(space, sm, "logit", make_rng(20 + sm))
            emb = spec.embed_full()
            assert emb.submodel == 0
            for owner in spec.ordering:
                np.testing.assert_array_equal(emb.mechanism_table(owner),
                                              spec.mechanism_table(owner))


class TestReconstruction:
    @pytest.mark.parametrize("link", ["logit", "probit"])
    def test_round_trip_p2_binary(self, link):
        rng = make_rng(30)
        model = random_san_truth(rng, 2, 0, link, sizes=[2, 2])
        truth = model.full_table()
        moments = joint_indicator_moments(truth, ["y1", "y2"])
        rec = reconstruct_algorithm1(materialize(truth), moments, link)
        assert np.max(np.abs(rec.full.mass - truth.mass)) < 1e-6
        for s in rec.steps:
            assert s.decomposition_residual < 1e-8

    def test_arbitrary_observed_table(self):
        rng = make_rng(31)
        space = space_p2()
        base = make_table(list(space.variables) + [], rng.uniform(0.2, 1, size=space.shape))
        obs_mass = np.zeros((3, 3, 4))
        obs_mass[:2] = rng.uniform(0.05, 1, size=(2, 3, 4))
        obs = ObservedTable(space, obs_mass / obs_mass.sum())
        moments = joint_indicator_moments(base, ["y1", "y2"])
        # moments must dominate the observed parts; a y-margin of a mixture does
        y_obs = obs.mass[:2, :2, :3].sum(axis=0)
        mix = 0.5 * marginalize(base, ["y1", "y2"]).mass + 0.5 * y_obs / y_obs.sum()
        moments = [MomentConstraint(m.scope, m.values, float((m.values * mix).sum()))
                   for m in moments]
        try:
            rec = reconstruct_algorithm1(obs, moments, "logit")
        except InfeasibleConstraintError:
            pytest.skip("random moments incompatible with the observed table")
        eq = observational_equivalence(rec.full, rec.full, moments)
        assert (eq.max_obs_gap, eq.max_moment_gap) == (0.0, 0.0)
        assert np.max(np.abs(materialize(rec.full).mass - obs.mass)) < 1e-6
        y = marginalize(rec.full, ["y1", "y2"])
        assert max(abs(moment(y, m) - m.target) for m in moments) < 1e-8

    def test_zero_missingness_step_skipped(self):
        rng = make_rng(32)
        space = space_p2()
        spec = random_san_spec(space, 3, "logit", rng, always_observed=["y2"])
        model = FullDataModel(random_joint(space, rng), spec)
        truth = model.full_table()
        rec = reconstruct_algorithm1(materialize(truth), joint_indicator_moments(truth,
                                                                                ["y1", "y2"]))
        skipped = {s.variable: s.skipped for s in rec.steps}
        assert skipped == {"y1": False, "y2": True}
        assert "y2" not in rec.mechanisms
        assert float(marginalize(rec.full, ["M[y2]"]).mass[1]) == 0.0
        assert np.max(np.abs(rec.full.mass - truth.mass)) < 1e-6

    def test_missing_x_rejected(self):
        space = build_space([("x", 2), ("y", 2)], ["y"])
        mass = np.full((3, 3), 1 / 9)
        with pytest.raises(ValidationError):
            reconstruct_algorithm1(ObservedTable(space, mass), [])

    def test_no_informative_moment(self):
        rng = make_rng(33)
        model = random_san_truth(rng, 2, 3, "logit", sizes=[2, 2])
        truth = model.full_table()
        only_y1 = joint_indicator_moments(truth, ["y1"])
        with pytest.raises(IdentificationError) as err:
            reconstruct_algorithm1(materialize(truth), only_y1)
        assert err.value.detail["variable"] == "y2"

    def test_never_observed(self):
        space = build_space([("x", 2), ("y", 2)], ["y"])
        mass = np.zeros((3, 3))
        mass[:2, 2] = 0.5
        y = make_table([space["y"]], [1, 1])
        with pytest.raises(IdentificationError):
            reconstruct_algorithm1(ObservedTable(space, mass), joint_indicator_moments(y))

    def test_infeasible_names_variable(self):
        rng = make_rng(34)
        model = random_san_truth(rng, 1, 0, "logit", sizes=[2])
        truth = model.full_table()
        bad = [MomentConstraint(("y1",), [0.0, 1.0], 1.5)]
        with pytest.raises(InfeasibleConstraintError) as err:
            reconstruct_algorithm1(materialize(truth), bad)
        assert err.value.detail["variable"] == "y1"


class TestEquivalence:
    def test_identity(self):
        model = random_san_truth(make_rng(40), 2, 1, "logit")
        t = model.full_table()
        eq = observational_equivalence(t, t, joint_indicator_moments(t, ["y1", "y2"]))
        assert (eq.max_obs_gap, eq.max_moment_gap) == (0.0, 0.0)

    def test_perturbed_mechanism_detected(self):
        rng = make_rng(41)
        model = random_san_truth(rng, 2, 1, "logit")
        t = model.full_table()
        spec = model.mechanism
        other = spec.with_coefficients(spec.coefficients + 0.5)
        t2 = FullDataModel(model.joint, other).full_table()
        assert observational_equivalence(t, t2).max_obs_gap > 1e-3


class TestSimulate:
    def test_missing_fractions(self):
        rng = make_rng(50)
        space = space_p2()
        spec = SanSpec(space, "logit", 5)
        spec = spec.with_coefficients(rng.normal(size=spec.n_coef))
        model = FullDataModel(random_joint(space, rng), spec)
        full = model.full_table()
        n = 100_000
        ds = simulate(model, n, 7)
        frac = ds.missing_fractions()
        for y in space.y_names:
            p = float(marginalize(full, [f"M[{y}]"]).mass[1])
            assert abs(frac[y] - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_deterministic(self):
        model = random_san_truth(make_rng(51), 2, 3, "logit")
        a, b = simulate(model, 500, 9), simulate(model, 500, 9)
        assert a == b and a.codes.tobytes() == b.codes.tobytes()
        assert simulate(model, 500, 10) != a

    def test_single_record(self):
        model = random_san_truth(make_rng(52), 2, 0, "logit")
        ds = simulate(model, 1, 0)
        assert ds.n == 1
        assert set(np.unique(ds.codes)) <= {MISSING, 0, 1, 2}

    def test_invalid_n(self):
        model = random_san_truth(make_rng(53), 1, 0, "logit")
        with pytest.raises(ValidationError):
            simulate(model, 0, 0)

    def test_empirical_observed_table_converges(self):
        model = random_san_truth(make_rng(54), 1, 0, "logit", sizes=[2])
        obs = materialize(model.full_table())
        ds = simulate(model, 50_000, 3)
        counts = ds.materialized_counts() / ds.n
        assert np.max(np.abs(counts - obs.mass)) < 0.01
