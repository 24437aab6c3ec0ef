"""Binary-response link functions and the divergence generators they induce.

For a link ``lam`` and odds constant ``c > 0`` the generator is
``f(z) = int_0^z lam(v / (c + v)) dv``, strictly convex on ``(0, inf)`` with
``f'(z) = lam(z / (c + z))``.  Its convex conjugate is
``f*(eta) = c * int_{-inf}^eta odds(lam^{-1}(t)) dt``, which is what the dual
projection solver evaluates.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import ValidationError

LINKS = ("logit", "probit", "cloglog")

# Gauss-Legendre nodes for the probit odds integral over [eta - 30, eta].
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)
_PANELS = np.linspace(-30.0, 0.0, 16)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Link:
    """One of ``logit``, ``probit``, ``cloglog``; all maps are vectorized."""

    kind: str

    def __post_init__(self):
        if self.kind not in LINKS:
            raise ValidationError(f"unknown link {self.kind!r}; expected one of {LINKS}")

    def __call__(self, p):
        return self.eval(p)

    def eval(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "logit":
            return special.logit(p)
        if self.kind == "probit":
            return special.ndtri(p)
        return np.log(-np.log1p(-p))

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=np.float64)
        if self.kind == "logit":
            return special.expit(eta)
        if self.kind == "probit":
            return special.ndtr(eta)
        return -np.expm1(-np.exp(eta))

    def log_inverse(self, eta):
        """``log lam^{-1}(eta)`` and ``log(1 - lam^{-1}(eta))``, computed stably."""
        eta = np.asarray(eta, dtype=np.float64)
        if self.kind == "logit":
            return -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)
        if self.kind == "probit":
            return special.log_ndtr(eta), special.log_ndtr(-eta)
        e = np.exp(eta)
        return np.log(-np.expm1(-e)), -e

    def derivative(self, p):
        """``d lam / d p``."""
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "logit":
            return 1.0 / (p * (1.0 - p))
        if self.kind == "probit":
            x = special.ndtri(p)
            return np.exp(0.5 * x * x + _LOG_SQRT_2PI)
        return 1.0 / ((1.0 - p) * -np.log1p(-p))

    def odds(self, eta):
        """``p / (1 - p)`` at ``p = lam^{-1}(eta)``."""
        eta = np.asarray(eta, dtype=np.float64)
        if self.kind == "logit":
            return np.exp(eta)
        if self.kind == "probit":
            return np.exp(special.log_ndtr(eta) - special.log_ndtr(-eta))
        return np.expm1(np.exp(eta))

    def odds_derivative(self, eta):
        eta = np.asarray(eta, dtype=np.float64)
        if self.kind == "logit":
            return np.exp(eta)
        if self.kind == "probit":
            # d/deta Phi(eta)/Phi(-eta) = phi(eta) / Phi(-eta)^2
            logphi = -0.5 * eta * eta - _LOG_SQRT_2PI
            return np.exp(logphi - 2.0 * special.log_ndtr(-eta))
        return np.exp(np.exp(eta) + eta)

    def odds_integral(self, eta):
        """``int_{-inf}^eta odds(t) dt``."""
        eta = np.asarray(eta, dtype=np.float64)
        if self.kind == "logit":
            return np.exp(eta)
        if self.kind == "cloglog":
            return _ein(np.exp(eta))
        return _probit_odds_integral(eta)


def _ein(x):
    """Entire exponential integral ``int_0^x (e^s - 1)/s ds`` for ``x >= 0``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 0.05
    xs = x[small]
    # series sum_k x^k / (k k!)
    term = xs.copy()
    acc = xs.copy()
    for k in range(2, 12):
        term = term * xs / k
        acc = acc + term / k
    out[small] = acc
    xl = x[~small]
    with np.errstate(over="ignore"):
        out[~small] = special.expi(xl) - np.euler_gamma - np.log(xl)
    return out


def _probit_odds_integral(eta: np.ndarray) -> np.ndarray:
    # log-odds is convex with slope >= 4 phi(0), so [eta - 30, eta] captures
    # everything to ~1e-20 relative; composite Gauss-Legendre on 15 panels.
    flat = np.atleast_1d(eta).reshape(-1)
    a = _PANELS[:-1]
    b = _PANELS[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    offsets = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    weights = (half[:, None] * _GL_W[None, :]).ravel()
    t = flat[:, None] + offsets[None, :]
    vals = np.exp(special.log_ndtr(t) - special.log_ndtr(-t))
    out = vals @ weights
    return out.reshape(np.shape(eta))


def get_link(kind) -> Link:
    return kind if isinstance(kind, Link) else Link(str(kind))


@dataclass(frozen=True)
class FGenerator:
    """``f(z) = int_0^z lam(v / (c + v)) dv`` for a link and odds ``c``."""

    link: Link
    c: float

    def __post_init__(self):
        object.__setattr__(self, "link", get_link(self.link))
        c = float(self.c)
        if not (c > 0.0 and math.isfinite(c)):
            raise ValidationError(f"odds constant c must be positive and finite, got {self.c!r}")
        object.__setattr__(self, "c", c)

    @classmethod
    def from_pi(cls, link, pi: float) -> "FGenerator":
        """Generator for a missingness probability ``pi`` (``c = (1 - pi)/pi``)."""
        if not 0.0 < pi < 1.0:
            raise ValidationError(f"pi must lie strictly between 0 and 1, got {pi!r}")
        return cls(link, (1.0 - pi) / pi)

    def derivative(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.link.eval(z / (self.c + z))

    def second_derivative(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.link.derivative(z / (self.c + z)) * self.c / (self.c + z) ** 2

    def ratio(self, eta):
        """Inverse of ``f'``: the density ratio at linear predictor ``eta``."""
        return self.c * self.link.odds(eta)

    def ratio_derivative(self, eta):
        return self.c * self.link.odds_derivative(eta)

    def conjugate(self, eta):
        """Convex conjugate ``f*(eta)``."""
        return self.c * self.link.odds_integral(eta)

    def value(self, z):
        """Vectorized ``f(z)``; closed form for logit, quadrature otherwise."""
        z = np.asarray(z, dtype=np.float64)
        if np.any(z < 0):
            raise ValidationError("f is defined for z >= 0 only")
        if self.link.kind == "logit":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(z > 0, z * np.log(z / self.c) - z, 0.0)
            return out
        return np.vectorize(lambda t: _quad_f(self.link.kind, self.c, float(t)),
                            otypes=[np.float64])(z)


@functools.lru_cache(maxsize=65536)
def _quad_f(kind: str, c: float, z: float) -> float:
    if z == 0.0:
        return 0.0
    link = Link(kind)

    def integrand(v):
        return float(link.eval(v / (c + v)))

    # split at c so the log-type singularity at 0 sits alone in the first piece
    pieces = [0.0, min(z, c)] + ([z] if z > c else [])
    total = 0.0
    for lo, hi in zip(pieces[:-1], pieces[1:]):
        val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-13, limit=400)
        total += val
    return total


def f_lambda(generator: FGenerator, z: float) -> float:
    """Evaluate the generator at ``z >= 0``."""
    z = float(z)
    if z < 0:
        raise ValidationError("f_lambda needs z >= 0")
    return float(generator.value(z))
