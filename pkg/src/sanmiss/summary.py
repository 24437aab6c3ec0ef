"""Posterior summaries, effective sample sizes and histogram data."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_PROBS = (0.025, 0.25, 0.5, 0.75, 0.975)
DEFAULT_BINS = 50


def autocorrelation(x) -> np.ndarray:
    """Sample autocorrelation at all lags (FFT, biased normalization)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.concatenate([[1.0], np.zeros(n - 1)])
    return acov / acov[0]


def ess(x) -> float:
    """Effective sample size by the initial monotone sequence estimator.

    A constant chain gets ``len(x)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 4 or np.ptp(x) == 0.0:
        return float(n)
    rho = autocorrelation(x)
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m:2]
    pos = np.flatnonzero(pairs <= 0)
    k = pos[0] if pos.size else pairs.size
    pairs = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(n))
    return float(n / tau)


def _as_matrix(chain_or_draws, names=None):
    if hasattr(chain_or_draws, "draws"):
        return list(chain_or_draws.parameter_names), [chain_or_draws.draws()]
    if isinstance(chain_or_draws, (list, tuple)) and chain_or_draws and \
            hasattr(chain_or_draws[0], "draws"):
        return list(chain_or_draws[0].parameter_names), [c.draws() for c in chain_or_draws]
    if isinstance(chain_or_draws, (list, tuple)) and chain_or_draws and \
            all(np.ndim(m) == 2 for m in chain_or_draws):
        mats = [np.asarray(m, dtype=np.float64) for m in chain_or_draws]
        names = list(names) if names is not None else \
            [f"p{i}" for i in range(mats[0].shape[1])]
        return names, mats
    arr = np.asarray(chain_or_draws, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    names = list(names) if names is not None else [f"p{i}" for i in range(arr.shape[1])]
    return names, [arr]


def summarize_posterior(chain, probs: Sequence[float] = DEFAULT_PROBS, names=None) -> dict:
    """Mean, sd, quantiles (linear interpolation) and ESS per parameter.

    ``chain`` is a :class:`~sanmiss.inference.Chain`, a list of chains or
    of per-chain (n_draws, n_params) arrays (pooled; ESS summed over
    chains), or a single array with ``names``.
    """
    names, mats = _as_matrix(chain, names)
    if not mats or any(m.shape[0] == 0 for m in mats):
        raise ValidationError("cannot summarize an empty chain")
    probs = [float(p) for p in probs]
    if any(not 0.0 <= p <= 1.0 for p in probs):
        raise ValidationError("quantile probabilities must lie in [0, 1]")
    pooled = np.vstack(mats)
    out = {}
    for k, name in enumerate(names):
        col = pooled[:, k]
        sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
        q = np.quantile(col, probs, method="linear")
        out[name] = {
            "mean": float(np.mean(col)),
            "sd": sd,
            "quantiles": {repr(p): float(v) for p, v in zip(probs, q)},
            "ess": float(sum(ess(m[:, k]) for m in mats)),
            "n": int(col.size),
        }
    return out


def histogram(values, bins: int = DEFAULT_BINS) -> dict:
    """Equal-width bin counts over the sample range."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("cannot histogram an empty sample")
    counts, edges = np.histogram(values, bins=int(bins))
    return {"edges": edges.tolist(), "counts": counts.tolist()}
