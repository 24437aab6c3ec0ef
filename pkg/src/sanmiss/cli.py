"""Command-line entry point: ``sanmiss <command> CONFIG [--seed N] [--out DIR]``.

Each run reads one JSON config and writes its artifacts to the output
directory.  Library errors exit with a code from :mod:`sanmiss.errors`
and a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from ._version import __version__
from .errors import ConfigError, SanmissError, ValidationError
from .inference import (AUX_MODES, AuxInfo, GibbsConfig, InferenceModelSpec, gibbs_fit)
from .links import LINKS, FGenerator, get_link
from .projection import ConstraintSet, ProjectionOptions, project
from .san import (ORDERING_POLICIES, SUBMODELS, FullDataModel, SanSpec,
                  joint_indicator_moments, make_rng, observational_equivalence,
                  observed_fractions, random_joint, reconstruct_algorithm1, resolve_ordering,
                  simulate)
from .summary import DEFAULT_BINS, DEFAULT_PROBS, histogram, summarize_posterior
from .tables import ObservedTable, VariableSpace, build_space, marginalize, materialize

COMMANDS = ("simulate", "project", "identify", "fit", "summarize")


class RunContext:
    """A loaded config with overrides applied and paths resolved."""

    def __init__(self, command, config: dict, base: Path, out: Path, seed: int):
        self.command = command
        self.config = config
        self.base = base
        self.out = out
        self.seed = seed

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def provenance(self) -> dict:
        return {"command": self.command, "version": __version__, "seed": self.seed,
                "config": self.config}

    def get(self, key, default=None, required=False):
        if key not in self.config:
            if required:
                raise ConfigError(f"config is missing {key!r}", field=key)
            return default
        return self.config[key]


# ---------------------------------------------------------------------------
# config parsing


def _int(value, name, lo=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}", field=name)
    if lo is not None and value < lo:
        raise ConfigError(f"{name} must be at least {lo}", field=name)
    return value


def _link(value) -> str:
    if value not in LINKS:
        raise ConfigError(f"link must be one of {list(LINKS)}, got {value!r}", field="link")
    return value


def _submodel(value) -> int:
    if isinstance(value, bool) or value not in SUBMODELS:
        raise ConfigError(f"submodel must be one of {sorted(SUBMODELS)}, got {value!r}",
                          field="submodel")
    return int(value)


def _ordering(space, value, fractions=None):
    """``declared``, ``by_missingness_desc`` or an explicit permutation."""
    if value is None:
        value = "declared"
    if isinstance(value, str):
        if value not in ORDERING_POLICIES:
            raise ConfigError(f"ordering must be one of {list(ORDERING_POLICIES)} or a list",
                              field="ordering")
        if value == "by_missingness_desc" and fractions is None:
            raise ConfigError("ordering 'by_missingness_desc' needs data", field="ordering")
    elif not isinstance(value, list):
        raise ConfigError("ordering must be a policy name or a list of Y names",
                          field="ordering")
    return resolve_ordering(space, value, fractions)


def _space(ctx) -> VariableSpace:
    return io.space_from_json(ctx.get("space", required=True))


def _san_spec(space, model: dict, fractions=None, rng=None) -> SanSpec:
    link = _link(model.get("link", "logit"))
    submodel = _submodel(model.get("submodel", 0))
    ordering = _ordering(space, model.get("ordering"), fractions)
    spec = SanSpec(space, link, submodel, ordering, model.get("baselines"),
                   model.get("always_observed", ()))
    coef = model.get("coefficients")
    if coef is None:
        return spec
    if isinstance(coef, list):
        return spec.with_coefficients(coef)
    if isinstance(coef, dict) and "random_scale" in coef:
        if rng is None:
            raise ConfigError("random coefficients are only available when simulating")
        return spec.with_coefficients(rng.normal(0.0, float(coef["random_scale"]),
                                                 size=spec.n_coef))
    if isinstance(coef, dict):
        names = spec.coefficient_names()
        unknown = sorted(set(coef) - set(names))
        if unknown:
            raise ConfigError(f"unknown coefficient names: {unknown}", field="coefficients")
        return spec.with_coefficients([float(coef.get(n, 0.0)) for n in names])
    raise ConfigError("coefficients must be a list, a name map or {'random_scale': s}",
                      field="coefficients")


def _truth_model(ctx, space, model_cfg, rng) -> FullDataModel:
    spec = _san_spec(space, model_cfg, rng=rng)
    joint_cfg = model_cfg.get("joint", {"random_floor": 0.2})
    if "random_floor" in joint_cfg:
        joint = random_joint(space, rng, float(joint_cfg["random_floor"]))
    else:
        joint = io.table_from_json(joint_cfg, space).transpose(space.names)
    return FullDataModel(joint, spec)


def _solver_options(cfg: dict | None) -> ProjectionOptions:
    cfg = dict(cfg or {})
    allowed = {"tol", "max_iter", "smoothing", "smoothing_eps", "feasibility_check"}
    bad = sorted(set(cfg) - allowed)
    if bad:
        raise ConfigError(f"unknown solver options: {bad}", field="solver")
    return ProjectionOptions(**cfg)


def _margins(ctx, space):
    src = ctx.get("margins", required=True)
    if isinstance(src, str):
        src = ctx.path(src)
    return io.load_margins(src, space)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(ctx: RunContext) -> dict:
    space = _space(ctx)
    n = _int(ctx.get("n", required=True), "n", lo=1)
    truth_seq, data_seq = np.random.SeedSequence(ctx.seed).spawn(2)
    model = _truth_model(ctx, space, ctx.get("model", required=True), make_rng(truth_seq))
    ds = simulate(model, n, make_rng(data_seq), ctx.get("x_missing_rate"))
    data_path = ctx.out / "dataset.csv"
    io.write_dataset(ds, data_path)
    y_margin = marginalize(model.joint, list(space.y_names))
    io.write_json(io.joint_to_margins_json(y_margin), ctx.out / "margins.json")
    report = {
        "provenance": ctx.provenance(),
        "dataset": data_path.name,
        "margins": "margins.json",
        "n": ds.n,
        "missing_fractions": {k: round(v, 4) for k, v in ds.missing_fractions().items()},
        "truth": {
            "mechanism": model.mechanism.to_dict(),
            "coefficients": dict(zip(model.mechanism.coefficient_names(),
                                     model.mechanism.coefficients.tolist())),
            "joint": io.table_to_json(model.joint),
        },
    }
    io.write_json(report, ctx.out / "simulate.json")
    return report


def cmd_project(ctx: RunContext) -> dict:
    Q = io.table_from_json(ctx.get("Q", required=True))
    lookup = {v.name: v for v in Q.variables}
    cons = ctx.get("constraints", required=True)
    fixed = io.table_from_json(cons.get("fixed_marginal", {"variables": [], "mass": [1.0]}),
                               lookup)
    moments = tuple(io.parse_moment(m, k, lookup) for k, m in
                    enumerate(cons.get("moments", [])))
    link = get_link(_link(ctx.get("link", "logit")))
    if "pi" in ctx.config:
        gen = FGenerator.from_pi(link, float(ctx.config["pi"]))
    else:
        gen = FGenerator(link, float(ctx.get("c", 1.0)))
    res = project(Q, ConstraintSet(fixed, moments), gen, _solver_options(ctx.get("solver")))
    out = {"provenance": ctx.provenance(), "result": res.to_dict(),
           "table": io.table_to_json(res.table)}
    io.write_json(out, ctx.out / "projection.json")
    return out


def cmd_identify(ctx: RunContext) -> dict:
    space = _space(ctx)
    truth = None
    if "truth" in ctx.config:
        truth = _truth_model(ctx, space, ctx.config["truth"], make_rng(ctx.seed)).full_table()
        observed = materialize(truth)
    elif "data" in ctx.config:
        ds = io.load_dataset(ctx.path(ctx.config["data"]), space)
        counts = ds.materialized_counts().astype(np.float64)
        observed = ObservedTable(space, counts / counts.sum())
    else:
        raise ConfigError("identify needs 'data' or 'truth'", field="data")
    if ctx.get("margins") == "from_truth":
        if truth is None:
            raise ConfigError("margins 'from_truth' needs a 'truth' model", field="margins")
        moments = joint_indicator_moments(truth, list(space.y_names))
    else:
        moments = list(_margins(ctx, space).constraints)
    ordering = _ordering(space, ctx.get("ordering"), observed_fractions(observed))
    rec = reconstruct_algorithm1(observed, moments, _link(ctx.get("link", "logit")),
                                 list(ordering), _solver_options(ctx.get("solver")))
    diag = {
        "ordering": list(rec.ordering),
        "steps": [s.to_dict() for s in rec.steps],
    }
    rec_obs = materialize(rec.full)
    diag["observed_gap"] = float(np.max(np.abs(rec_obs.mass - observed.mass)))
    if truth is not None:
        full_truth = truth.transpose(rec.full.names)
        diag["sup_norm_vs_truth"] = float(np.max(np.abs(rec.full.mass - full_truth.mass)))
        eq = observational_equivalence(rec.full, full_truth, moments)
        diag["moment_gap"] = eq.max_moment_gap
    out = {"provenance": ctx.provenance(), "diagnostics": diag,
           "full_table": io.table_to_json(rec.full), "joint": io.table_to_json(rec.joint)}
    io.write_json(out, ctx.out / "identify.json")
    return out


def _aux(ctx, space, cfg: dict) -> AuxInfo:
    mode = cfg.get("mode")
    if mode not in AUX_MODES:
        raise ConfigError(f"aux mode must be one of {list(AUX_MODES)}, got {mode!r}",
                          field="aux_mode")
    if mode == "known_kappa":
        src = cfg.get("margins")
        if src is None:
            raise ConfigError("known_kappa needs 'margins'", field="margins")
        margins = io.load_margins(ctx.path(src) if isinstance(src, str) else src, space)
        if margins.joint is None or set(margins.joint.names) != set(space.y_names):
            raise ValidationError("known_kappa needs a joint margin over the whole Y block")
        return AuxInfo.known(margins.joint.transpose(space.y_names).flat)
    if mode == "refreshment_sample":
        if "counts" in cfg:
            return AuxInfo.refreshment(cfg["counts"])
        if "data" not in cfg:
            raise ConfigError("refreshment_sample needs 'data' or 'counts'", field="aux")
        ys = [space[n] for n in space.y_names]
        sub = build_space([(v.name, v.levels) for v in ys], space.y_names)
        ds = io.load_dataset(ctx.path(cfg["data"]), sub, always_observed=space.y_names)
        return AuxInfo.from_refresh_dataset(ds, space.y_names)
    try:
        return AuxInfo.estimator(cfg["kappa_hat"], cfg["covariance"])
    except KeyError:
        raise ConfigError("estimator_density needs 'kappa_hat' and 'covariance'",
                          field="aux") from None


def _gibbs_config(ctx) -> GibbsConfig:
    cfg = dict(ctx.get("mcmc", {}))
    allowed = {"n_iter", "burn_in", "thin", "method", "n_chains"}
    bad = sorted(set(cfg) - allowed)
    if bad:
        raise ConfigError(f"unknown mcmc options: {bad}", field="mcmc")
    for k in ("n_iter", "burn_in", "thin", "n_chains"):
        if k in cfg:
            _int(cfg[k], k)
    return GibbsConfig(seed=ctx.seed, store_imputations=False, **cfg)


def cmd_fit(ctx: RunContext) -> dict:
    space = _space(ctx)
    model_cfg = ctx.get("model", required=True)
    _submodel(model_cfg.get("submodel", 0))
    always = model_cfg.get("always_observed", ())
    ds = io.load_dataset(ctx.path(ctx.get("data", required=True)), space, always)
    san = _san_spec(space, model_cfg, ds.missing_fractions())
    priors = dict(ctx.get("priors", {}))
    spec = InferenceModelSpec(san, _aux(ctx, space, ctx.get("aux", required=True)),
                              priors.get("alpha_sd", 1.5), priors.get("beta_sd", 3.0))
    gcfg = _gibbs_config(ctx)
    fit = gibbs_fit(spec, ds, gcfg)
    names = spec.parameter_names()
    io.write_samples(ctx.out / "samples.csv", names, fit.chains)
    out = {
        "provenance": ctx.provenance(),
        "samples": "samples.csv",
        "parameter_names": names,
        "summary": summarize_posterior(list(fit.chains)),
        "zero_support": list(fit.zero_support),
        "chains": [c.diagnostics for c in fit.chains],
    }
    io.write_json(out, ctx.out / "summary.json")
    return out


def cmd_summarize(ctx: RunContext) -> dict:
    names, chain_ids, mat = io.read_samples(ctx.path(ctx.get("samples", required=True)))
    probs = ctx.get("probs", list(DEFAULT_PROBS))
    bins = _int(ctx.get("bins", DEFAULT_BINS), "bins", lo=1)
    mats = [mat[chain_ids == c] for c in np.unique(chain_ids)]
    out = {
        "provenance": ctx.provenance(),
        "summary": summarize_posterior(mats, probs, names),
        "histograms": {n: histogram(mat[:, k], bins) for k, n in enumerate(names)},
    }
    io.write_json(out, ctx.out / "summary.json")
    return out


HANDLERS = {"simulate": cmd_simulate, "project": cmd_project, "identify": cmd_identify,
            "fit": cmd_fit, "summarize": cmd_summarize}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanmiss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
    return parser


def run(command: str, config: dict, base=".", out=None, seed=None) -> dict:
    """Run one command on an in-memory config; returns the written report."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}", field="command")
    config = copy.deepcopy(config)
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        config["seed"] = int(seed)
    seed = _int(config.get("seed", 0), "seed", lo=0)
    base = Path(base)
    # the output directory is not echoed so reruns elsewhere stay byte-identical
    out = Path(out) if out is not None else base / config.pop("out", ".")
    config.pop("out", None)
    out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[command](RunContext(command, config, base, out, seed))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg_path = Path(args.config)
        config = io.read_json(cfg_path)
        run(args.command, config, cfg_path.parent, args.out, args.seed)
    except SanmissError as exc:
        record = {"error": exc.code, "message": str(exc), "detail": exc.detail,
                  "exit_code": exc.exit_code}
        sys.stderr.write(json.dumps(io.clean_json(record)) + "\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
