"""Bayesian inference for a binary outcome with SAN nonresponse in Y.

The working model for one unit is

    f(m | x, y, gamma) * theta(y)^x (1 - theta(y))^(1 - x) * kappa(y)

times a term ``A(kappa)`` carrying the auxiliary information about the law
of Y.  ``theta(y)`` is the probability of the second level of the single X
variable in stratum ``y``.  Missing X values are ignorable and are
integrated out (imputed inside the sampler).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .data import MISSING, Dataset
from .links import get_link
from .errors import ConfigError, ValidationError
from .san import SanSpec, _assemble, make_rng
from .tables import ProbTable, materialize

log = logging.getLogger(__name__)

AUX_MODES = ("known_kappa", "refreshment_sample", "estimator_density")
METHODS = ("polya_gamma", "truncated_normal", "random_walk_metropolis")
_METHOD_LINK = {"polya_gamma": "logit", "truncated_normal": "probit"}


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True, eq=False)
class AuxInfo:
    """Auxiliary information about the law of Y.

    All arrays are over the Y cells in declared Y order (row-major).
    """

    mode: str
    kappa: np.ndarray | None = None
    refresh_counts: np.ndarray | None = None
    kappa_hat: np.ndarray | None = None
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in AUX_MODES:
            raise ConfigError(f"aux mode must be one of {AUX_MODES}, got {self.mode!r}",
                              field="aux_mode")

    @classmethod
    def known(cls, kappa) -> "AuxInfo":
        return cls("known_kappa", kappa=np.asarray(kappa, dtype=np.float64).ravel())

    @classmethod
    def refreshment(cls, counts) -> "AuxInfo":
        c = np.asarray(counts)
        if c.size and (np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0))):
            raise ValidationError("refreshment counts must be nonnegative integers")
        return cls("refreshment_sample", refresh_counts=c.astype(np.int64).ravel())

    @classmethod
    def estimator(cls, kappa_hat, covariance) -> "AuxInfo":
        kh = np.asarray(kappa_hat, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
        if cov.shape != (kh.size, kh.size):
            raise ValidationError("covariance shape does not match the estimate")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("covariance is not positive definite") from None
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-14 * np.max(np.abs(cov))):
            raise ValidationError("covariance is not symmetric")
        return cls("estimator_density", kappa_hat=kh, covariance=cov)

    @classmethod
    def from_refresh_dataset(cls, dataset: Dataset, y_names: Sequence[str]) -> "AuxInfo":
        cols = [dataset.space.index(n) for n in y_names]
        codes = dataset.codes[:, cols]
        if np.any(codes == MISSING):
            raise ValidationError("refreshment records must be complete")
        shape = tuple(dataset.space[n].size for n in y_names)
        flat = np.ravel_multi_index(codes.T, shape) if len(codes) else np.zeros(0, int)
        return cls.refreshment(np.bincount(flat, minlength=int(np.prod(shape))))


def margin_term_logpdf(aux: AuxInfo, kappa) -> float:
    """``log A(kappa)`` for the auxiliary-information mode of ``aux``."""
    kappa = np.asarray(kappa, dtype=np.float64).ravel()
    if aux.mode == "known_kappa":
        if kappa.shape == aux.kappa.shape and np.allclose(kappa, aux.kappa, rtol=0, atol=1e-12):
            return 0.0
        return -math.inf
    if aux.mode == "refreshment_sample":
        r = aux.refresh_counts
        if r.shape != kappa.shape:
            raise ValidationError("refreshment counts and kappa differ in size")
        pos = r > 0
        if np.any(kappa[pos] <= 0):
            return -math.inf
        return math.fsum(r[pos] * np.log(kappa[pos]))
    k = kappa[:aux.kappa_hat.size]
    if aux.kappa_hat.size not in (kappa.size, kappa.size - 1):
        raise ValidationError("estimator has the wrong dimension")
    return float(stats.multivariate_normal.logpdf(aux.kappa_hat, mean=k, cov=aux.covariance))


class InferenceModelSpec:
    """Outcome model, mechanism template, priors and auxiliary information.

    Parameters
    ----------
    san : SanSpec
        Mechanism template; its coefficient values are ignored.
    aux : AuxInfo
    prior_sd_alpha, prior_sd_beta : float
        Normal prior scales for alpha-type and beta-type coefficients.
    """

    def __init__(self, san: SanSpec, aux: AuxInfo, prior_sd_alpha: float = 1.5,
                 prior_sd_beta: float = 3.0):
        space = san.space
        if space.q != 1:
            raise ValidationError("the outcome model needs exactly one X variable")
        if space[space.x_names[0]].size != 2:
            raise ValidationError("the X variable must be binary")
        if space.p < 1:
            raise ValidationError("the Y block is empty")
        if not (prior_sd_alpha > 0 and prior_sd_beta > 0):
            raise ValidationError("prior standard deviations must be positive")
        self.san = san
        self.space = space
        self.aux = aux
        self.prior_sd_alpha = float(prior_sd_alpha)
        self.prior_sd_beta = float(prior_sd_beta)
        self.y_shape = tuple(space[n].size for n in space.y_names)
        self.n_y = int(np.prod(self.y_shape))
        if aux.mode == "known_kappa":
            if aux.kappa.size != self.n_y:
                raise ValidationError("known kappa has the wrong number of cells")
            if np.any(aux.kappa < 0) or abs(math.fsum(aux.kappa) - 1.0) > 1e-9:
                raise ValidationError("known kappa must be a probability table")
        elif aux.mode == "refreshment_sample":
            if aux.refresh_counts.size != self.n_y:
                raise ValidationError("refreshment counts have the wrong number of cells")
        elif aux.kappa_hat.size not in (self.n_y, self.n_y - 1):
            raise ValidationError(
                f"kappa estimate must have {self.n_y} or {self.n_y - 1} entries")

    @property
    def x_name(self) -> str:
        return self.space.x_names[0]

    def prior_sd(self) -> np.ndarray:
        out = []
        for j in self.san.ordering:
            for t in self.san.terms[j]:
                sd = self.prior_sd_alpha if t.kind == "alpha" else self.prior_sd_beta
                out.extend([sd] * t.n_free)
        return np.array(out)

    def y_cell_labels(self) -> list[str]:
        ys = [self.space[n] for n in self.space.y_names]
        return [",".join(f"{v.name}={v.levels[c]}" for v, c in zip(ys, cell))
                for cell in np.ndindex(*self.y_shape)]

    def parameter_names(self) -> list[str]:
        labels = self.y_cell_labels()
        return ([f"theta[{c}]" for c in labels] + [f"kappa[{c}]" for c in labels]
                + self.san.coefficient_names())


@dataclass(frozen=True, eq=False)
class Params:
    """Parameter values: ``theta`` and ``kappa`` over Y cells (declared order)."""

    gamma: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray


def _joint_xy(spec: InferenceModelSpec, theta, kappa) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(spec.y_shape)
    kappa = np.asarray(kappa, dtype=np.float64).reshape(spec.y_shape)
    return np.stack([(1.0 - theta) * kappa, theta * kappa])


def implied_full_table(spec: InferenceModelSpec, params: Params) -> ProbTable:
    """``f(x, y, m)`` under ``params`` over (X, Y, M[Y])."""
    space = spec.space
    san = spec.san.with_coefficients(params.gamma)
    xy = _joint_xy(spec, params.theta, params.kappa)     # axes X then declared Y
    names = [spec.x_name] + list(space.y_names)
    order = [names.index(n) for n in [spec.x_name] + list(san.full_ordering)]
    return _assemble(space, san.full_ordering, np.transpose(xy, order), san.mechanisms())


def observed_loglik(spec: InferenceModelSpec, params: Params, dataset: Dataset) -> float:
    """Observed-data log-likelihood, summing over every completion of each record.

    The W mechanism of missing X contributes nothing.  The ``A(kappa)``
    term is not included (see :func:`margin_term_logpdf`).
    """
    if dataset.space != spec.space:
        raise ValidationError("dataset and model use different spaces")
    gamma = np.asarray(params.gamma, dtype=np.float64).ravel()
    if gamma.size != spec.san.n_coef:
        raise ValidationError(f"expected {spec.san.n_coef} mechanism coefficients")
    for arr, nm in ((params.theta, "theta"), (params.kappa, "kappa")):
        if np.size(arr) != spec.n_y:
            raise ValidationError(f"{nm} needs {spec.n_y} entries")
    full = implied_full_table(spec, Params(gamma, params.theta, params.kappa))
    obs = np.array(materialize(full).mass)
    xa = spec.space.index(spec.x_name)
    sl = [slice(None)] * obs.ndim
    sl[xa] = slice(0, -1)
    star = [slice(None)] * obs.ndim
    star[xa] = -1
    obs[tuple(star)] = obs[tuple(sl)].sum(axis=xa)
    counts = dataset.materialized_counts()
    pos = counts > 0
    if np.any(obs[pos] <= 0):
        return -math.inf
    return math.fsum(counts[pos] * np.log(obs[pos]))


# ---------------------------------------------------------------------------
# conditional updates for binary-regression coefficients


@dataclass(frozen=True)
class OneHotDesign:
    """Rows that are sums of one-hot features; ``features[i]`` lists the
    active columns of row ``i`` (entries ``< 0`` are ignored)."""

    features: np.ndarray
    dim: int

    def dense(self) -> np.ndarray:
        H, T = self.features.shape
        out = np.zeros((H, self.dim))
        for t in range(T):
            col = self.features[:, t]
            keep = col >= 0
            np.add.at(out, (np.flatnonzero(keep), col[keep]), 1.0)
        return out


def _gram(design, dense, weights):
    if isinstance(design, OneHotDesign):
        return _kernels.onehot_gram(design.features, weights, design.dim)
    return (dense.T * weights) @ dense


def _gaussian_draw(prec, rhs, rng):
    """Draw from N(prec^-1 rhs, prec^-1)."""
    return _kernels.precision_draw(prec, rhs, rng.standard_normal(rhs.size))


def logistic_conditional_update(coef, design, responses, prior_sd, rng, method="polya_gamma",
                                link="logit", trials=None, step=None):
    """One kernel step for binary-regression coefficients given the data.

    Parameters
    ----------
    coef : array (d,)
        Current coefficients.
    design : array (n, d) or OneHotDesign
        Design rows.
    responses : array (n,)
        Binary responses, or success counts when ``trials`` is given.
    prior_sd : float or array (d,)
        Independent normal prior scales (mean zero).
    rng : numpy Generator
    method : {"polya_gamma", "truncated_normal", "random_walk_metropolis"}
    link : str
        ``polya_gamma`` needs logit, ``truncated_normal`` needs probit.
    trials : array (n,), optional
        Number of Bernoulli trials behind each row (rows with identical
        covariates can be pooled this way).
    step : array (d,), optional
        Proposal scales for the Metropolis kernel.

    Returns
    -------
    coef : array (d,)
    accept_rate : float or None
        Fraction of accepted componentwise proposals (Metropolis only).
    """
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}", field="method")
    link = getattr(link, "kind", link)
    need = _METHOD_LINK.get(method)
    if need is not None and link != need:
        raise ConfigError(f"{method} requires the {need} link, not {link}", field="method")
    coef = np.asarray(coef, dtype=np.float64)
    d = coef.size
    dense = design.dense() if isinstance(design, OneHotDesign) else np.asarray(design, float)
    if dense.shape[1] != d:
        raise ValidationError("design and coefficient sizes differ")
    y = np.asarray(responses, dtype=np.float64)
    n = np.ones_like(y) if trials is None else np.asarray(trials, dtype=np.float64)
    if np.any(y < 0) or np.any(y > n) or (trials is None and np.any((y != 0) & (y != 1))):
        raise ValidationError("responses must be binary (or counts within trials)")
    prior_prec = np.broadcast_to(1.0 / np.asarray(prior_sd, dtype=np.float64) ** 2, (d,))
    if d == 0:
        return coef.copy(), None
    return _coef_step(coef, design, dense, y, n, prior_prec, rng, method, link, step)


def _coef_step(coef, design, dense, y, n, prior_prec, rng, method, link, step):
    """Unchecked kernel step shared by the public update and the sampler."""
    d = coef.size
    eta = dense @ coef
    if method == "polya_gamma":
        omega = _kernels.pg_sum(n.astype(np.int64), eta, rng)
        prec = _gram(design, dense, omega)
        prec[np.diag_indices(d)] += prior_prec
        return _gaussian_draw(prec, dense.T @ (y - 0.5 * n), rng), None
    if method == "truncated_normal":
        ni = n.astype(np.int64)
        rows = np.repeat(np.arange(y.size), ni)
        # within each row the first y draws are successes
        start = np.repeat(np.cumsum(ni) - ni, ni)
        succ = (np.arange(rows.size) - start) < y.astype(np.int64)[rows]
        mu = eta[rows]
        lo = np.where(succ, -mu, -np.inf)
        hi = np.where(succ, np.inf, -mu)
        z = stats.truncnorm.rvs(lo, hi, loc=mu, scale=1.0, size=rows.size,
                                random_state=rng) if rows.size else np.zeros(0)
        zsum = np.bincount(rows, weights=z, minlength=y.size)
        prec = _gram(design, dense, n.astype(np.float64))
        prec[np.diag_indices(d)] += prior_prec
        return _gaussian_draw(prec, dense.T @ zsum, rng), None
    # componentwise random-walk Metropolis on the pooled likelihood
    lk = get_link(link)
    step = np.full(d, 0.5) if step is None else np.broadcast_to(np.asarray(step, float), (d,))

    def loglik(e):
        lp, lq = lk.log_inverse(e)
        return float(y @ lp + (n - y) @ lq)

    cur = coef.copy()
    cur_ll = loglik(eta)
    acc = 0
    for k in range(d):
        prop = cur[k] + step[k] * rng.standard_normal()
        e_new = eta + dense[:, k] * (prop - cur[k])
        ll = loglik(e_new)
        log_r = ll - cur_ll - 0.5 * prior_prec[k] * (prop * prop - cur[k] * cur[k])
        if math.log(rng.random()) < log_r:
            cur[k] = prop
            eta, cur_ll = e_new, ll
            acc += 1
    return cur, acc / d


# ---------------------------------------------------------------------------
# Gibbs sampler


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 20000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    method: str = "polya_gamma"
    n_chains: int = 1
    store_imputations: bool = True
    allow_empty: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}", field="method")
        if not (isinstance(self.n_iter, int) and isinstance(self.burn_in, int)):
            raise ConfigError("n_iter and burn_in must be integers")
        if not self.n_iter > self.burn_in >= 0:
            raise ConfigError("need n_iter > burn_in >= 0", field="burn_in")
        if self.thin < 1 or self.n_chains < 1:
            raise ConfigError("thin and n_chains must be positive")


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    gamma: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray
    imputations: np.ndarray | None


@dataclass(frozen=True, eq=False)
class Chain:
    """Retained draws of one chain.

    ``imputations[t]`` lists the imputed level codes of the missing entries,
    in the order of ``missing_entries`` (record, variable) pairs.
    """

    parameter_names: tuple[str, ...]
    gamma: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray
    imputations: np.ndarray | None
    missing_entries: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.theta.shape[0]

    def __getitem__(self, t) -> PosteriorSample:
        imp = None if self.imputations is None else self.imputations[t]
        return PosteriorSample(self.gamma[t], self.theta[t], self.kappa[t], imp)

    def draws(self) -> np.ndarray:
        """All parameters as one matrix with columns ``parameter_names``."""
        return np.hstack([self.theta, self.kappa, self.gamma])


class _Engine:
    """Precomputed index maps for one (model, dataset) pair.

    Internal layout for the full table is (X, Y in mechanism order, M in
    mechanism order); cells of (X, Y) are called ``xy`` cells.
    """

    def __init__(self, spec: InferenceModelSpec, dataset: Dataset, method: str):
        self.spec = spec
        self.san = spec.san
        san = self.san
        space = spec.space
        self.method = method
        need = _METHOD_LINK.get(method)
        if need is not None and san.link.kind != need:
            raise ConfigError(f"{method} requires the {need} link, not {san.link.kind}",
                              field="method")
        self.order = san.full_ordering
        p = len(self.order)
        self.p = p
        y_ord_vars = [space[n] for n in self.order]
        self.y_ord_shape = tuple(v.size for v in y_ord_vars)
        self.n_y = spec.n_y
        nm = 1 << p
        self.nm = nm
        # declared-Y flat index -> mechanism-order flat index
        decl = list(space.y_names)
        perm_axes = [decl.index(n) for n in self.order]
        grid = np.arange(self.n_y).reshape(spec.y_shape)
        self.decl_to_ord = np.transpose(grid, perm_axes).ravel()      # ord flat -> decl flat
        self.ord_from_decl = np.argsort(self.decl_to_ord)

        # gather indices for the sequential assembly
        self.mech_gather = []
        shape = (2,) + self.y_ord_shape
        for i, owner in enumerate(self.order):
            if owner not in san.terms:
                self.mech_gather.append(None)
                shape = shape + (2,)
                continue
            hv = san.hybrid_variables(owner)
            nd = len(shape)
            grids = np.indices(shape)
            idx = [grids[0]]
            for t in range(i):
                idx.append(np.where(grids[1 + p + t] == 1, y_ord_vars[t].size, grids[1 + t]))
            idx += [grids[1 + t] for t in range(i, p)]
            hshape = tuple(v.size for v in hv)
            self.mech_gather.append(np.ravel_multi_index(tuple(idx), hshape).ravel())
            shape = shape + (2,)
            del nd
        self.full_shape = shape

        # per-mechanism hybrid map and one-hot design
        self.blocks = []
        slices = san.coefficient_slices()
        full_grid = np.indices(self.full_shape).reshape(len(self.full_shape), -1)
        prior_sd = spec.prior_sd()
        for i, owner in enumerate(self.order):
            if owner not in san.terms:
                continue
            hv = san.hybrid_variables(owner)
            hshape = tuple(v.size for v in hv)
            H = int(np.prod(hshape))
            sl = slices[owner]
            feats, pos = [], 0
            hgrid = np.indices(hshape).reshape(len(hshape), -1)
            hnames = [v.name for v in hv]
            for t in san.terms[owner]:
                fidx = np.full(t.shape, -1, dtype=np.int64)
                fidx[t.free] = np.arange(t.n_free) + pos
                pos += t.n_free
                cell = tuple(hgrid[hnames.index(a)] for a in t.axis_names)
                feats.append(fidx[cell] if t.axis_names else np.full(H, fidx[()]))
            features = np.stack(feats, axis=1) if feats else np.zeros((H, 0), dtype=np.int64)
            design = OneHotDesign(features, sl.stop - sl.start)
            hyb_of_full = self.mech_gather[i].reshape(self.full_shape[:1 + p + i])
            # extend to the full layout (later M axes do not matter)
            hyb_full = np.broadcast_to(
                hyb_of_full.reshape(hyb_of_full.shape + (1,) * (p - i)),
                self.full_shape).ravel()
            m_full = full_grid[1 + p + i]
            self.blocks.append(dict(owner=owner, index=i, slice=sl, H=H, design=design,
                                    dense=design.dense(), hyb_full=hyb_full, m_full=m_full,
                                    prior_prec=1.0 / prior_sd[sl] ** 2, step=np.full(sl.stop - sl.start, 0.5),
                                    acc_sum=0.0, acc_n=0))

        # records
        codes = dataset.codes
        self.n = codes.shape[0]
        xcol = space.index(spec.x_name)
        ycols = [space.index(n) for n in self.order]
        self.xcol, self.ycols = xcol, ycols
        miss = codes == MISSING
        mbits = miss[:, ycols].astype(np.int64)
        self.m_flat = np.ravel_multi_index(mbits.T, (2,) * p) if self.n else np.zeros(0, int)
        for k, n in enumerate(self.order):
            if n in san.always_observed and np.any(mbits[:, k]):
                raise ValidationError(f"{n!r} is declared always observed but has missing values",
                                      variable=n)
        self.incomplete = np.flatnonzero(miss[:, [xcol] + ycols].any(axis=1))
        self.complete_xy = np.zeros(self.n, dtype=np.int64)
        comp = np.setdiff1d(np.arange(self.n), self.incomplete)
        if comp.size:
            self.complete_xy[comp] = np.ravel_multi_index(
                tuple(codes[comp][:, c] for c in [xcol] + ycols), (2,) + self.y_ord_shape)
        # group incomplete records by materialized row
        sub = codes[self.incomplete][:, [xcol] + ycols]
        if sub.size:
            rows, inv = np.unique(sub, axis=0, return_inverse=True)
            inv = inv.ravel()
        else:
            rows, inv = np.zeros((0, 1 + p), dtype=np.int64), np.zeros(0, dtype=np.int64)
        sizes = (2,) + self.y_ord_shape
        comp_xy, starts = [], []
        pos = 0
        for r in rows:
            axes = [np.arange(s) if r[k] == MISSING else np.array([r[k]])
                    for k, s in enumerate(sizes)]
            cells = np.ravel_multi_index(np.meshgrid(*axes, indexing="ij"), sizes).ravel()
            comp_xy.append(cells)
            starts.append(pos)
            pos += cells.size
        self.seg_start = np.array(starts, dtype=np.int64)
        self.seg_len = np.array([c.size for c in comp_xy], dtype=np.int64)
        self.comp_xy = np.concatenate(comp_xy) if comp_xy else np.zeros(0, dtype=np.int64)
        self.rec_group = inv
        self.rec_m = self.m_flat[self.incomplete]
        # full-table index of each completion differs per record only via m
        # (all records in a group share m)
        group_m = np.zeros(rows.shape[0], dtype=np.int64)
        if rows.shape[0]:
            group_m[inv] = self.rec_m
        self.comp_full = self.comp_xy * nm + np.repeat(group_m, self.seg_len)
        self.seg_end = self.seg_start + self.seg_len
        # missing-entry bookkeeping for output (declared variable order)
        rec, var = np.nonzero(miss)
        self.missing_entries = np.stack([rec, var], axis=1)
        self.codes = codes
        sizes_xy = np.array((2,) + self.y_ord_shape)
        strides = np.concatenate([np.cumprod(sizes_xy[::-1])[::-1][1:], [1]])
        colpos = {c: k for k, c in enumerate([xcol] + ycols)}
        kpos = np.array([colpos[v] for v in var], dtype=np.int64)
        self.entry_rec = rec
        self.entry_stride = strides[kpos] if kpos.size else np.zeros(0, dtype=np.int64)
        self.entry_size = sizes_xy[kpos] if kpos.size else np.zeros(0, dtype=np.int64)
        self.block_at = {b["index"]: b for b in self.blocks}

    # -- pieces -----------------------------------------------------------

    def full_table(self, gamma, theta_ord, kappa_ord):
        """Flat ``f(x, y, m)`` in the internal layout."""
        arr = np.empty(2 * self.n_y)
        np.multiply(1.0 - theta_ord, kappa_ord, out=arr[:self.n_y])
        np.multiply(theta_ord, kappa_ord, out=arr[self.n_y:])
        link = self.san.link
        for i in range(self.p):
            out = np.zeros((arr.size, 2))
            g = self.mech_gather[i]
            if g is None:
                out[:, 0] = arr
            else:
                blk = self.block_at[i]
                pm = link.inverse(blk["dense"] @ gamma[blk["slice"]])[g]
                out[:, 1] = arr * pm
                out[:, 0] = arr - out[:, 1]
            arr = out.ravel()
        return arr

    def impute(self, F, rng, xy):
        if self.incomplete.size == 0:
            return xy
        w = F[self.comp_full]
        cs = np.cumsum(w)
        end = cs[self.seg_end - 1]
        base = np.where(self.seg_start > 0, cs[self.seg_start - 1], 0.0)
        tot = end - base
        g = self.rec_group
        target = base[g] + rng.random(g.size) * tot[g]
        pos = np.searchsorted(cs, target, side="right")
        pos = np.clip(pos, self.seg_start[g], self.seg_end[g] - 1)
        out = xy.copy()
        out[self.incomplete] = self.comp_xy[pos]
        return out

    def initial_xy(self, rng):
        """Complete data with missing entries drawn from observed frequencies."""
        sizes = (2,) + self.y_ord_shape
        cols = [self.xcol] + self.ycols
        filled = self.codes[:, cols].copy()
        for k, c in enumerate(cols):
            col = filled[:, k]
            obs = col[col != MISSING]
            freq = np.bincount(obs, minlength=sizes[k]).astype(float) + (0 if obs.size else 1)
            freq /= freq.sum()
            bad = col == MISSING
            col[bad] = rng.choice(sizes[k], size=int(bad.sum()), p=freq)
            filled[:, k] = col
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(filled.T, sizes)

    def zero_support(self) -> list[str]:
        """Coefficients whose cell pattern never appears among the observed values."""
        space = self.spec.space
        san = self.san
        out = []
        materialized = np.where(self.codes == MISSING,
                                np.array([v.size for v in space.variables]), self.codes)
        for b in self.blocks:
            owner = b["owner"]
            for t, names in zip(san.terms[owner],
                                [t.coefficient_names(space) for t in san.terms[owner]]):
                cols = []
                for v, s in zip(t.variables, t.starred):
                    if v == owner:
                        cols.append(None)
                    else:
                        cols.append((space.index(v), s))
                cells = [c for c in np.ndindex(*t.shape) if t.free[c]]
                for cell, name in zip(cells, names):
                    ok = np.ones(self.n, dtype=bool)
                    for c, lvl in zip(cols, cell):
                        if c is None:
                            continue
                        col, s = c
                        vals = materialized[:, col] if s else self.codes[:, col]
                        ok &= vals == lvl
                    if not ok.any():
                        out.append(name)
        return out


def _chain(spec: InferenceModelSpec, engine: _Engine, config: GibbsConfig,
           seed_seq) -> Chain:
    rng = make_rng(seed_seq)
    n_y = engine.n_y
    d = spec.san.n_coef
    gamma = np.zeros(d)
    aux = spec.aux
    o2d = engine.decl_to_ord            # ordered flat -> declared flat
    if aux.mode == "known_kappa":
        kappa = aux.kappa[o2d].copy()
    else:
        kappa = np.full(n_y, 1.0 / n_y)
    theta = np.full(n_y, 0.5)
    refresh = aux.refresh_counts[o2d] if aux.mode == "refreshment_sample" else None
    xy = engine.initial_xy(rng)
    n_keep = len(range(config.burn_in, config.n_iter, config.thin))
    out_g = np.empty((n_keep, d))
    out_t = np.empty((n_keep, n_y))
    out_k = np.empty((n_keep, n_y))
    n_mis = engine.missing_entries.shape[0]
    store = config.store_imputations and n_mis > 0
    out_imp = np.empty((n_keep, n_mis), dtype=np.int16) if store else None
    kappa_acc = [0, 0]
    link = spec.san.link.kind
    keep = 0
    d2o = engine.ord_from_decl
    for it in range(config.n_iter):
        # (ii) outcome probabilities per stratum
        strat = xy % n_y
        xbit = xy // n_y
        ny = np.bincount(strat, minlength=n_y)
        sy = np.bincount(strat, weights=xbit, minlength=n_y)
        theta = rng.beta(1.0 + sy, 1.0 + ny - sy)
        # (iii) mechanism coefficients, one modeled variable at a time
        full_idx = xy * engine.nm + engine.m_flat
        for b in engine.blocks:
            h = b["hyb_full"][full_idx]
            trials = np.bincount(h, minlength=b["H"])
            succ = np.bincount(h, weights=b["m_full"][full_idx], minlength=b["H"])
            sl = b["slice"]
            new, acc = _coef_step(gamma[sl], b["design"], b["dense"], succ,
                                  trials.astype(np.float64), b["prior_prec"], rng,
                                  config.method, link, b["step"])
            gamma[sl] = new
            if acc is not None:
                b["acc_sum"] += acc
                b["acc_n"] += 1
                if it < config.burn_in and (it + 1) % 50 == 0:
                    rate = b["acc_sum"] / b["acc_n"]
                    b["step"] = b["step"] * math.exp(rate - 0.44)
                    b["acc_sum"], b["acc_n"] = 0.0, 0
        # (iv) law of Y
        if aux.mode == "refreshment_sample":
            kappa = rng.dirichlet(1.0 + ny + refresh)
        elif aux.mode == "estimator_density":
            prop = rng.dirichlet(1.0 + ny)
            log_r = (margin_term_logpdf(aux, prop[d2o]) - margin_term_logpdf(aux, kappa[d2o]))
            kappa_acc[1] += 1
            if math.log(rng.random()) < log_r:
                kappa = prop
                kappa_acc[0] += 1
        # (i) missing entries
        F = engine.full_table(gamma, theta, kappa)
        xy = engine.impute(F, rng, xy)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            out_g[keep] = gamma
            out_t[keep] = theta[d2o]
            out_k[keep] = kappa[d2o]
            if store:
                out_imp[keep] = _imputed_values(engine, xy)
            keep += 1
    diag = {"backend": _kernels.backend(), "method": config.method}
    rates = {b["owner"]: (b["acc_sum"] / b["acc_n"] if b["acc_n"] else None)
             for b in engine.blocks} if config.method == "random_walk_metropolis" else {}
    if rates:
        diag["acceptance_rate"] = rates
    if aux.mode == "estimator_density":
        diag["kappa_acceptance_rate"] = kappa_acc[0] / max(kappa_acc[1], 1)
    return Chain(tuple(spec.parameter_names()), out_g, out_t, out_k, out_imp,
                 engine.missing_entries, diag)


def _imputed_values(engine: _Engine, xy) -> np.ndarray:
    return (xy[engine.entry_rec] // engine.entry_stride) % engine.entry_size


@dataclass(frozen=True, eq=False)
class FitResult:
    chains: tuple[Chain, ...]
    zero_support: tuple[str, ...]
    config: GibbsConfig


def gibbs_fit(spec: InferenceModelSpec, dataset: Dataset, config: GibbsConfig) -> FitResult:
    """Run ``config.n_chains`` independent chains (sequentially)."""
    if dataset.space != spec.space:
        raise ValidationError("dataset and model use different spaces")
    if dataset.n == 0 and not config.allow_empty:
        raise ValidationError("dataset is empty")
    engine = _Engine(spec, dataset, config.method)
    support = engine.zero_support() if dataset.n else []
    if support:
        log.warning("%d mechanism coefficients have no observed support", len(support))
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    chains = tuple(_chain(spec, engine, config, s) for s in seqs)
    return FitResult(chains, tuple(support), config)
