import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from sanmiss import cli, io
from sanmiss.data import MISSING, Dataset
from sanmiss.errors import ConfigError, ValidationError
from sanmiss.tables import build_space

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BRFSS = [("diabetes", ["no", "yes"]), ("age", ["20-34", "35-49", "50-64", "65+"]),
         ("race", ["white", "other", "black"]), ("sex", ["male", "female"])]


def brfss_space():
    return build_space(BRFSS, ["age", "race", "sex"])


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write(path, text):
    Path(path).write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_missing_fractions(self, tmp_path):
        # NA counts 17, 247, 589, 0 out of 10000
        n = 10_000
        codes = np.zeros((n, 4), dtype=int)
        for col, k in enumerate([17, 247, 589, 0]):
            codes[:k, col] = MISSING
        space = brfss_space()
        io.write_dataset(Dataset(space, codes), tmp_path / "d.csv")
        ds = io.load_dataset(tmp_path / "d.csv", space)
        frac = {k: round(v, 4) for k, v in ds.missing_fractions().items()}
        assert frac == {"diabetes": 0.0017, "age": 0.0247, "race": 0.0589, "sex": 0.0}

    def test_empty_data(self, tmp_path):
        p = write(tmp_path / "d.csv", "diabetes,age,race,sex\n")
        with pytest.raises(ValidationError):
            io.load_dataset(p, brfss_space())

    def test_levels_and_column_order(self, tmp_path):
        p = write(tmp_path / "d.csv", "sex,age,race,diabetes\nfemale,20-34,NA,yes\n")
        ds = io.load_dataset(p, brfss_space())
        assert ds.codes.tolist() == [[1, 0, MISSING, 1]]

    def test_unknown_level(self, tmp_path):
        p = write(tmp_path / "d.csv", "diabetes,age,race,sex\nno,18-19,white,male\n")
        with pytest.raises(ValidationError) as err:
            io.load_dataset(p, brfss_space())
        assert err.value.detail["variable"] == "age"

    def test_na_in_fully_observed(self, tmp_path):
        p = write(tmp_path / "d.csv", "diabetes,age,race,sex\nno,20-34,white,NA\n")
        with pytest.raises(ValidationError):
            io.load_dataset(p, brfss_space(), always_observed=["sex"])

    def test_malformed_rows(self, tmp_path):
        p = write(tmp_path / "d.csv", "diabetes,age,race,sex\nno,20-34\n")
        with pytest.raises(ValidationError):
            io.load_dataset(p, brfss_space())
        p = write(tmp_path / "e.csv", "diabetes,age,race\nno,20-34,white\n")
        with pytest.raises(ValidationError):
            io.load_dataset(p, brfss_space())

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        space = brfss_space()
        codes = np.stack([rng.integers(-1, v.size, 300) for v in space.variables], axis=1)
        ds = Dataset(space, codes)
        io.write_dataset(ds, tmp_path / "d.csv")
        assert io.load_dataset(tmp_path / "d.csv", space) == ds

    def test_quoted_labels(self, tmp_path):
        space = build_space([("x", ["a,b", 'c"d']), ("y", ["u", "v"])], ["y"])
        ds = Dataset(space, [[0, 1], [1, MISSING]])
        io.write_dataset(ds, tmp_path / "q.csv")
        assert io.load_dataset(tmp_path / "q.csv", space) == ds


def joint_json(space, probs):
    names = list(space.y_names)
    shape = tuple(space[n].size for n in names)
    cells = list(np.ndindex(*shape))
    return {"joint": [{"cells": {n: space[n].levels[c] for n, c in zip(names, cell)},
                       "prob": float(p)} for cell, p in zip(cells, probs)]}


class TestLoadMargins:
    def test_joint_expands(self, tmp_path):
        space = brfss_space()
        probs = np.random.default_rng(1).dirichlet(np.ones(24))
        (tmp_path / "m.json").write_text(json.dumps(joint_json(space, probs)))
        m = io.load_margins(tmp_path / "m.json", space)
        assert len(m.constraints) == 24
        assert m.joint.names == ("age", "race", "sex")
        np.testing.assert_allclose(m.joint.flat, probs, atol=1e-15)
        assert all(c.scope == ("age", "race", "sex") for c in m.constraints)

    def test_moments_form(self):
        m = io.load_margins({"moments": [{"scope": ["age"], "values": [0, 1, 2, 3],
                                          "target": 1.7}]}, brfss_space())
        assert len(m.constraints) == 1 and m.joint is None
        c = m.constraints[0]
        assert c.scope == ("age",) and c.target == 1.7
        np.testing.assert_array_equal(c.values, [0, 1, 2, 3])

    def test_values_by_cell(self):
        src = {"moments": [{"scope": ["sex"], "target": 0.5,
                            "values_by_cell": [{"cells": {"sex": "female"}, "value": 1}]}]}
        c = io.load_margins(src, brfss_space()).constraints[0]
        np.testing.assert_array_equal(c.values, [0, 1])

    def test_joint_not_normalized(self):
        space = brfss_space()
        probs = np.full(24, 0.98 / 24)
        with pytest.raises(ValidationError):
            io.load_margins(joint_json(space, probs), space)

    @pytest.mark.parametrize("bad", [
        {"moments": [{"scope": ["height"], "values": [0, 1], "target": 1}]},
        {"moments": [{"scope": ["diabetes"], "values": [0, 1], "target": 1}]},
        {"moments": [{"scope": ["sex"], "values": [0, 1], "target": "inf"}]},
        {"moments": [{"scope": ["sex"], "values": [0, 1, 2], "target": 1}]},
        {"other": []},
    ])
    def test_invalid(self, bad):
        with pytest.raises((ValidationError, ConfigError)):
            io.load_margins(bad, brfss_space())


class TestJson:
    def test_float_round_trip(self, tmp_path):
        vals = [0.1, 1 / 3, 2.0 ** -1074, 1e308, np.nextafter(1.0, 2.0)]
        io.write_json({"v": vals}, tmp_path / "f.json")
        assert io.read_json(tmp_path / "f.json")["v"] == vals

    def test_nonfinite_to_null(self, tmp_path):
        io.write_json({"a": np.array([np.inf, 1.0])}, tmp_path / "f.json")
        assert io.read_json(tmp_path / "f.json")["a"] == [None, 1.0]

    def test_fmt_float(self):
        x = 0.1 + 0.2
        assert float(io.fmt_float(x)) == x


@pytest.fixture
def workdir(tmp_path):
    shutil.copytree(CONFIGS, tmp_path / "configs")
    return tmp_path


class TestCli:
    def test_identify_round_trip(self, workdir):
        rc = cli.main(["identify", str(workdir / "configs/identify.json"),
                       "--out", str(workdir / "idf")])
        assert rc == 0
        out = io.read_json(workdir / "idf/identify.json")
        assert out["diagnostics"]["sup_norm_vs_truth"] < 1e-6
        assert out["provenance"]["version"]
        assert out["provenance"]["seed"] == 3
        assert out["provenance"]["config"]["margins"] == "from_truth"

    def test_project_frozen(self, workdir):
        assert cli.main(["project", str(workdir / "configs/project.json"),
                         "--out", str(workdir / "p")]) == 0
        out = io.read_json(workdir / "p/projection.json")
        np.testing.assert_allclose(out["table"]["mass"], [0.28, 0.42, 0.12, 0.18], atol=1e-12)
        assert out["result"]["residuals"]["moments"] < 1e-10

    def test_simulate_fit_summarize_deterministic(self, workdir):
        cfg = workdir / "configs"
        sim = {"seed": 4, "n": 300, **{k: v for k, v in io.read_json(cfg / "simulate.json")
                                        .items() if k in ("space", "model")}}
        (cfg / "sim_small.json").write_text(json.dumps(sim))
        for run in ("a", "b"):
            assert cli.main(["simulate", str(cfg / "sim_small.json"),
                             "--out", str(workdir / run / "sim")]) == 0
        assert sha(workdir / "a/sim/dataset.csv") == sha(workdir / "b/sim/dataset.csv")
        assert sha(workdir / "a/sim/simulate.json") == sha(workdir / "b/sim/simulate.json")
        fit = io.read_json(cfg / "fit.json")
        fit.update(data="../a/sim/dataset.csv",
                   aux={"mode": "known_kappa", "margins": "../a/sim/margins.json"},
                   mcmc={"n_iter": 60, "burn_in": 20, "n_chains": 2})
        (cfg / "fit_small.json").write_text(json.dumps(fit))
        for run in ("a", "b"):
            assert cli.main(["fit", str(cfg / "fit_small.json"),
                             "--out", str(workdir / run / "fit")]) == 0
        assert sha(workdir / "a/fit/samples.csv") == sha(workdir / "b/fit/samples.csv")
        assert sha(workdir / "a/fit/summary.json") == sha(workdir / "b/fit/summary.json")
        header = (workdir / "a/fit/samples.csv").read_text().splitlines()[0]
        assert header.startswith('chain,draw,"theta[age=20-34,race=white,sex=male]"')
        summ = {"samples": str(workdir / "a/fit/samples.csv"), "bins": 50}
        (cfg / "summ.json").write_text(json.dumps(summ))
        assert cli.main(["summarize", str(cfg / "summ.json"),
                         "--out", str(workdir / "s")]) == 0
        out = io.read_json(workdir / "s/summary.json")
        name = "theta[age=20-34,race=white,sex=male]"
        assert out["summary"][name]["n"] == 80
        assert len(out["histograms"][name]["counts"]) == 50
        fit_summary = io.read_json(workdir / "a/fit/summary.json")["summary"][name]
        assert out["summary"][name]["mean"] == fit_summary["mean"]

    def test_seed_override(self, workdir):
        cfg = workdir / "configs/simulate.json"
        cli.main(["simulate", str(cfg), "--out", str(workdir / "s1"), "--seed", "1"])
        cli.main(["simulate", str(cfg), "--out", str(workdir / "s2"), "--seed", "2"])
        assert sha(workdir / "s1/dataset.csv") != sha(workdir / "s2/dataset.csv")
        assert io.read_json(workdir / "s1/simulate.json")["provenance"]["seed"] == 1

    def test_submodel_6_is_config_error(self, workdir, capsys):
        cfg = io.read_json(workdir / "configs/fit.json")
        cfg["model"]["submodel"] = 6
        (workdir / "bad.json").write_text(json.dumps(cfg))
        rc = cli.main(["fit", str(workdir / "bad.json"), "--out", str(workdir / "o")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config_error" and err["detail"]["field"] == "submodel"

    def test_infeasible_exit_code(self, workdir, capsys):
        cfg = io.read_json(workdir / "configs/project.json")
        cfg["constraints"]["moments"][0]["target"] = 2.0
        (workdir / "inf.json").write_text(json.dumps(cfg))
        assert cli.main(["project", str(workdir / "inf.json"), "--out",
                         str(workdir / "o")]) == 3
        assert json.loads(capsys.readouterr().err)["error"] == "infeasible_constraints"

    def test_convergence_exit_code(self, workdir, capsys):
        cfg = io.read_json(workdir / "configs/project.json")
        cfg["link"] = "probit"
        cfg["solver"] = {"max_iter": 1, "tol": 1e-15}
        (workdir / "nc.json").write_text(json.dumps(cfg))
        assert cli.main(["project", str(workdir / "nc.json"), "--out",
                         str(workdir / "o")]) == 4
        assert json.loads(capsys.readouterr().err)["error"] == "no_convergence"

    def test_identification_error_names_variable(self, workdir, capsys):
        cfg = io.read_json(workdir / "configs/identify.json")
        cfg["margins"] = {"moments": [{"scope": ["y1"], "values": [0, 1, 2], "target": 1.0}]}
        (workdir / "ni.json").write_text(json.dumps(cfg))
        assert cli.main(["identify", str(workdir / "ni.json"), "--out",
                         str(workdir / "o")]) == 3
        err = json.loads(capsys.readouterr().err)
        assert err["detail"]["variable"] == "y2"

    @pytest.mark.parametrize("patch", [{"seed": -1}, {"n": "many"}, {"model": {"link": "tan"}},
                                       {"model": {"ordering": "random"}}])
    def test_config_errors(self, workdir, patch):
        cfg = io.read_json(workdir / "configs/simulate.json")
        for k, v in patch.items():
            if isinstance(v, dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
        (workdir / "c.json").write_text(json.dumps(cfg))
        assert cli.main(["simulate", str(workdir / "c.json"), "--out", str(workdir / "o")]) == 2

    def test_missing_config_file(self, workdir):
        assert cli.main(["fit", str(workdir / "nope.json")]) == 2

    def test_run_rejects_unknown_command(self):
        with pytest.raises(ConfigError):
            cli.run("plot", {})
