"""Convergence diagnostics and posterior summaries over stored draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DiagnosticsError(ValueError):
    pass


def psrf(chains) -> float:
    """Potential scale reduction factor of one scalar quantity.

    Parameters
    ----------
    chains : array_like, shape (m, n)
        ``m >= 2`` traces of equal length ``n >= 10``.

    Returns
    -------
    float
        ``sqrt((d + 3) / (d + 1) * V / W)`` where ``V`` is the pooled
        posterior variance estimate, ``W`` the mean within-chain variance and
        ``d = 2 V^2 / var(V)`` its estimated degrees of freedom.  Identical
        chains give ``sqrt((n - 1) / n)`` rather than exactly one.  A trace
        with zero within-chain variance returns 1 if all chains agree and
        ``inf`` otherwise.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise DiagnosticsError("expected a (chains, draws) array")
    m, n = x.shape
    if m < 2:
        raise DiagnosticsError("psrf needs at least two chains")
    if n < 10:
        raise DiagnosticsError("psrf needs at least 10 draws per chain")
    means = x.mean(axis=1)
    s2 = x.var(axis=1, ddof=1)
    w = s2.mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return 1.0 if b == 0 else float("inf")
    v = (n - 1) / n * w + (m + 1) / (m * n) * b
    grand = means.mean()
    var_v = (
        ((n - 1) / n) ** 2 / m * s2.var(ddof=1)
        + ((m + 1) / (m * n)) ** 2 * 2.0 / (m - 1) * b**2
        + 2.0 * (m + 1) * (n - 1) / (m * n**2) * (n / m)
        * (np.cov(s2, means**2)[0, 1] - 2.0 * grand * np.cov(s2, means)[0, 1])
    )
    if var_v <= 0:
        # no sampling variability in V: df -> infinity
        return float(np.sqrt(v / w))
    df = 2.0 * v**2 / var_v
    return float(np.sqrt((df + 3.0) / (df + 1.0) * v / w))


def psrf_all(draws: np.ndarray) -> np.ndarray:
    """Column-wise :func:`psrf` of a ``(chains, draws, parameters)`` array."""
    draws = np.asarray(draws, dtype=float)
    return np.array([psrf(draws[:, :, p]) for p in range(draws.shape[2])])


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float


def posterior_summary(draws) -> Summary:
    """Pooled mean, sd and 2.5/50/97.5% quantiles of one scalar.

    ``draws`` may be ``(chains, draws)`` or flat.  Quantiles interpolate
    linearly between order statistics.
    """
    x = np.asarray(draws, dtype=float).ravel()
    if x.size == 0:
        raise DiagnosticsError("no draws to summarise")
    q = np.quantile(x, [0.025, 0.5, 0.975], method="linear")
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return Summary(float(x.mean()), sd, float(q[0]), float(q[1]), float(q[2]))


def summarize_columns(draws: np.ndarray) -> np.ndarray:
    """Vectorised summary of every column of ``(..., parameters)`` draws.

    Returns an array of shape ``(parameters, 5)``: mean, sd, q2.5, q50, q97.5.
    """
    flat = np.asarray(draws, dtype=float).reshape(-1, np.shape(draws)[-1])
    if flat.shape[0] == 0:
        raise DiagnosticsError("no draws to summarise")
    q = np.quantile(flat, [0.025, 0.5, 0.975], axis=0, method="linear")
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1])
    return np.column_stack([flat.mean(axis=0), sd, q[0], q[1], q[2]])
