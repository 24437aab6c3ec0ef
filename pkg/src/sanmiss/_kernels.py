"""Hot loops of the sampler, compiled with numba when available.

Setting ``SANMISS_DISABLE_NUMBA=1`` selects the pure-numpy versions, which
draw from the caller's ``numpy.random.Generator``.  The compiled versions
use numba's internal generator, seeded from the caller's generator on every
call, so each backend is deterministic for a given seed but the two
backends produce different streams.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy import special

_DISABLED = os.environ.get("SANMISS_DISABLE_NUMBA", "").strip() not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("disabled by SANMISS_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

TRUNC = 0.64
_PI = math.pi
_SEED_MAX = 2**32 - 1


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Polya-Gamma PG(1, z): alternating-series accept/reject with an
# exponential tail and a truncated inverse-Gaussian head.


@njit(cache=True)
def _a_coef(n, x):
    k = n + 0.5
    if x > TRUNC:
        return _PI * k * math.exp(-0.5 * k * k * _PI * _PI * x)
    return (2.0 / (_PI * x)) ** 1.5 * _PI * k * math.exp(-2.0 * k * k / x)


@njit(cache=True)
def _norm_logcdf(x):
    # log Phi(x); erfc keeps the left tail accurate
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * _PI)


@njit(cache=True)
def _texp_mass(z):
    fz = _PI * _PI / 8.0 + 0.5 * z * z
    b = math.sqrt(1.0 / TRUNC) * (TRUNC * z - 1.0)
    a = -math.sqrt(1.0 / TRUNC) * (TRUNC * z + 1.0)
    x0 = math.log(fz) + fz * TRUNC
    xb = x0 - z + _norm_logcdf(b)
    xa = x0 + z + _norm_logcdf(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@njit(cache=True)
def _rtigauss(z):
    """Inverse Gaussian(1/z, 1) truncated to (0, TRUNC)."""
    x = TRUNC + 1.0
    if z < 1.0 / TRUNC:
        alpha = 0.0
        u = 1.0
        while u > alpha:
            e1 = np.random.exponential()
            e2 = np.random.exponential()
            while e1 * e1 > 2.0 * e2 / TRUNC:
                e1 = np.random.exponential()
                e2 = np.random.exponential()
            x = 1.0 + e1 * TRUNC
            x = TRUNC / (x * x)
            alpha = math.exp(-0.5 * z * z * x)
            u = np.random.random()
    else:
        mu = 1.0 / z
        while x > TRUNC:
            y = np.random.standard_normal()
            y = y * y
            half = 0.5 * mu * y
            x = mu + half * mu - mu * math.sqrt(mu * y + half * half)
            if np.random.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@njit(cache=True)
def _pg1(z):
    z = 0.5 * abs(z)
    fz = _PI * _PI / 8.0 + 0.5 * z * z
    mass = _texp_mass(z)
    while True:
        if np.random.random() < mass:
            x = TRUNC + np.random.exponential() / fz
        else:
            x = _rtigauss(z)
        s = _a_coef(0, x)
        y = np.random.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _a_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _a_coef(n, x)
                if y > s:
                    break


@njit(cache=True)
def _pg_sum_numba(counts, psi, seed):
    np.random.seed(seed)
    out = np.zeros(counts.shape[0])
    for h in range(counts.shape[0]):
        acc = 0.0
        for _ in range(counts[h]):
            acc += _pg1(psi[h])
        out[h] = acc
    return out


def _a_coef_np(n, x):
    k = n + 0.5
    hi = _PI * k * np.exp(-0.5 * k * k * _PI * _PI * x)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        lo = (2.0 / (_PI * x)) ** 1.5 * _PI * k * np.exp(-2.0 * k * k / x)
    return np.where(x > TRUNC, hi, lo)


def _rtigauss_np(z, rng):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    todo = np.arange(z.size)
    while todo.size:
        zz = z[todo]
        small = zz < 1.0 / TRUNC
        x = np.empty_like(zz)
        ok = np.zeros(zz.size, dtype=bool)
        if np.any(small):
            m = small.sum()
            e1 = rng.standard_exponential(m)
            e2 = rng.standard_exponential(m)
            good = e1 * e1 <= 2.0 * e2 / TRUNC
            xs = TRUNC / (1.0 + e1 * TRUNC) ** 2
            alpha = np.exp(-0.5 * zz[small] ** 2 * xs)
            u = rng.random(m)
            x[small] = xs
            ok[small] = good & (u <= alpha)
        big = ~small
        if np.any(big):
            m = big.sum()
            mu = 1.0 / zz[big]
            y = rng.standard_normal(m) ** 2
            half = 0.5 * mu * y
            xb = mu + half * mu - mu * np.sqrt(mu * y + half * half)
            flip = rng.random(m) > mu / (mu + xb)
            xb = np.where(flip, mu * mu / xb, xb)
            x[big] = xb
            ok[big] = xb <= TRUNC
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def _texp_mass_np(z):
    fz = _PI * _PI / 8.0 + 0.5 * z * z
    b = math.sqrt(1.0 / TRUNC) * (TRUNC * z - 1.0)
    a = -math.sqrt(1.0 / TRUNC) * (TRUNC * z + 1.0)
    x0 = np.log(fz) + fz * TRUNC
    qdivp = 4.0 / _PI * (np.exp(x0 - z + special.log_ndtr(b)) + np.exp(x0 + z + special.log_ndtr(a)))
    return 1.0 / (1.0 + qdivp)


def pg1_numpy(z, rng: np.random.Generator) -> np.ndarray:
    """Vectorized PG(1, z) draws with a numpy generator."""
    z = 0.5 * np.abs(np.asarray(z, dtype=np.float64)).ravel()
    out = np.empty_like(z)
    todo = np.arange(z.size)
    while todo.size:
        zz = z[todo]
        fz = _PI * _PI / 8.0 + 0.5 * zz * zz
        tail = rng.random(zz.size) < _texp_mass_np(zz)
        x = np.empty_like(zz)
        x[tail] = TRUNC + rng.standard_exponential(int(tail.sum())) / fz[tail]
        if np.any(~tail):
            x[~tail] = _rtigauss_np(zz[~tail], rng)
        s = _a_coef_np(0, x)
        y = rng.random(zz.size) * s
        decided = np.zeros(zz.size, dtype=bool)
        accept = np.zeros(zz.size, dtype=bool)
        n = 0
        while not decided.all():
            n += 1
            und = ~decided
            if n % 2 == 1:
                s[und] -= _a_coef_np(n, x[und])
                hit = und & (y <= s)
                accept |= hit
                decided |= hit
            else:
                s[und] += _a_coef_np(n, x[und])
                decided |= und & (y > s)
        out[todo[accept]] = 0.25 * x[accept]
        todo = todo[~accept]
    return out


def pg_sum(counts, psi, rng: np.random.Generator) -> np.ndarray:
    """``sum of counts[h]`` independent PG(1, psi[h]) draws, for each ``h``."""
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    if HAVE_NUMBA:
        return _pg_sum_numba(counts, psi, int(rng.integers(0, _SEED_MAX)))
    total = int(counts.sum())
    if total == 0:
        return np.zeros(counts.size)
    draws = pg1_numpy(np.repeat(psi, counts), rng)
    return np.bincount(np.repeat(np.arange(counts.size), counts), weights=draws,
                       minlength=counts.size)


def pg_draw(psi, rng: np.random.Generator) -> np.ndarray:
    """One PG(1, psi_i) draw per entry."""
    psi = np.asarray(psi, dtype=np.float64)
    return pg_sum(np.ones(psi.size, dtype=np.int64), psi.ravel(), rng).reshape(psi.shape)


# ---------------------------------------------------------------------------
# Gram matrix of rows that are sums of one-hot features


@njit(cache=True)
def _onehot_gram_numba(features, weights, dim):
    out = np.zeros((dim, dim))
    for h in range(features.shape[0]):
        w = weights[h]
        if w == 0.0:
            continue
        for a in range(features.shape[1]):
            fa = features[h, a]
            if fa < 0:
                continue
            for b in range(features.shape[1]):
                fb = features[h, b]
                if fb >= 0:
                    out[fa, fb] += w
    return out


def _onehot_gram_numpy(features, weights, dim):
    H, T = features.shape
    design = np.zeros((H, dim))
    rows = np.repeat(np.arange(H), T)
    cols = features.ravel()
    keep = cols >= 0
    np.add.at(design, (rows[keep], cols[keep]), 1.0)
    return (design.T * weights) @ design


def onehot_gram(features, weights, dim: int) -> np.ndarray:
    """``sum_h weights[h] d_h d_h^T`` where ``d_h`` has ones at ``features[h]``.

    ``features`` is an (H, T) integer array; entries ``< 0`` are ignored.
    """
    features = np.ascontiguousarray(features, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if HAVE_NUMBA:
        return _onehot_gram_numba(features, weights, int(dim))
    return _onehot_gram_numpy(features, weights, int(dim))


# ---------------------------------------------------------------------------
# Gaussian draw from a precision matrix


@njit(cache=True)
def _precision_draw_numba(prec, rhs, z):
    d = rhs.shape[0]
    L = np.zeros((d, d))
    for j in range(d):
        s = prec[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            return np.full(d, np.nan)
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            s = prec[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    v = np.empty(d)
    for i in range(d):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * v[k]
        v[i] = s / L[i, i]
    w = v + z
    out = np.empty(d)
    for i in range(d - 1, -1, -1):
        s = w[i]
        for k in range(i + 1, d):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return out


def _precision_draw_numpy(prec, rhs, z):
    from scipy import linalg
    L = np.linalg.cholesky(prec)
    w = linalg.solve_triangular(L, rhs, lower=True, check_finite=False) + z
    return linalg.solve_triangular(L, w, lower=True, trans="T", check_finite=False)


def precision_draw(prec, rhs, z) -> np.ndarray:
    """``L^-T (L^-1 rhs + z)`` with ``prec = L L^T``.

    With ``z`` standard normal this is a draw from ``N(prec^-1 rhs, prec^-1)``.
    """
    prec = np.ascontiguousarray(prec, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    if HAVE_NUMBA:
        out = _precision_draw_numba(prec, rhs, z)
        if np.isnan(out).any():
            raise np.linalg.LinAlgError("precision matrix is not positive definite")
        return out
    return _precision_draw_numpy(prec, rhs, z)
