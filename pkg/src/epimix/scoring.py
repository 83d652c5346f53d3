"""Model comparison and predictive scores: WAIC, RPS, DSS and interval coverage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import PanelData
from .posterior import check_compatible, mean_draws
from .sampler import PosteriorSamples
from .spatial_graph import SpatialWeights


class ScoringError(ValueError):
    pass


# ---------------------------------------------------------------- WAIC


def waic(pointwise) -> tuple[float, float]:
    """WAIC from a ``(draws, observations)`` log-likelihood matrix.

    Extra trailing axes are flattened into observations.

    Returns
    -------
    waic, p_waic : float
        ``waic = -2 * (lppd - p_waic)`` with
        ``lppd = sum_obs log mean_draws exp(ll)`` and
        ``p_waic = sum_obs var_draws(ll)``.
    """
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim < 2 or ll.shape[0] < 2:
        raise ScoringError("waic needs at least two draws")
    ll = ll.reshape(ll.shape[0], -1)
    s = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(s)))
    p_waic = float(np.sum(ll.var(axis=0, ddof=1)))
    return -2.0 * (lppd - p_waic), p_waic


def lppd(pointwise) -> float:
    ll = np.asarray(pointwise, dtype=float)
    ll = ll.reshape(ll.shape[0], -1)
    return float(np.sum(logsumexp(ll, axis=0) - np.log(ll.shape[0])))


# ---------------------------------------------------------------- RPS


def rps(draws, y) -> float:
    """Ranked probability score of an empirical count forecast.

    ``sum_k (F(k) - 1[y <= k])**2`` over ``k = 0..max(draws, y)``, computed
    through the equivalent ``E|X - y| - E|X - X'| / 2``.
    """
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    if x.size == 0:
        raise ScoringError("rps needs at least one draw")
    n = x.size
    # sum over ordered pairs |x_i - x_j| = 2 * sum_k x_(k) * (2k - n - 1)
    ranks = 2.0 * np.arange(1, n + 1) - n - 1.0
    spread = 2.0 * np.dot(x, ranks) / n**2
    return max(float(np.mean(np.abs(x - float(y))) - 0.5 * spread), 0.0)


def rps_columns(draws: np.ndarray, y: np.ndarray) -> np.ndarray:
    """:func:`rps` for many forecasts: ``draws`` is ``(n_draws, ...)``, ``y`` matches ``draws.shape[1:]``."""
    x = np.sort(np.asarray(draws, dtype=float), axis=0)
    n = x.shape[0]
    if n == 0:
        raise ScoringError("rps needs at least one draw")
    y = np.asarray(y, dtype=float)
    ranks = (2.0 * np.arange(1, n + 1) - n - 1.0).reshape((n,) + (1,) * (x.ndim - 1))
    spread = 2.0 * np.sum(x * ranks, axis=0) / n**2
    return np.maximum(np.mean(np.abs(x - y[None]), axis=0) - 0.5 * spread, 0.0)


def rps_bruteforce(draws, y) -> float:
    """Direct cumulative sum; reference implementation for tests."""
    x = np.asarray(draws, dtype=np.int64).ravel()
    top = int(max(x.max(), y))
    total = 0.0
    for k in range(top + 1):
        f = np.mean(x <= k)
        total += (f - (1.0 if y <= k else 0.0)) ** 2
    return total


# ---------------------------------------------------------------- DSS and coverage


def dss(pred_mean, pred_var, y):
    """Dawid-Sebastiani score ``(y - mu)**2 / var + 2 log sd``."""
    pred_var = np.asarray(pred_var, dtype=float)
    if np.any(pred_var <= 0):
        raise ScoringError("dss needs a positive predictive variance")
    out = (np.asarray(y, dtype=float) - pred_mean) ** 2 / pred_var + np.log(pred_var)
    return out if np.ndim(out) else float(out)


def coverage(low: float, high: float, actual: float) -> bool:
    if low > high:
        raise ScoringError(f"inverted interval ({low}, {high})")
    return bool(low <= actual <= high)


# ---------------------------------------------------------------- report


@dataclass
class ScoreReport:
    """Fit and prediction scores of one run.

    ``rps_by_period`` / ``dss_by_period`` sum over areas for each modelled
    period; ``*_total`` sum over all cells and ``*_mean`` average over them.
    """

    waic: float
    p_waic: float
    rps_total: float
    rps_mean: float
    dss_total: float
    dss_mean: float
    rps_by_period: np.ndarray
    dss_by_period: np.ndarray
    periods: tuple = ()
    one_step_rps: float | None = None
    coverage_hits: float | None = None
    warnings: list = field(default_factory=list)

    def as_items(self) -> list[tuple[str, object]]:
        items = [
            ("waic", self.waic),
            ("p_waic", self.p_waic),
            ("rps_total", self.rps_total),
            ("rps_mean", self.rps_mean),
            ("dss_total", self.dss_total),
            ("dss_mean", self.dss_mean),
        ]
        if self.one_step_rps is not None:
            items.append(("one_step_rps", self.one_step_rps))
        if self.coverage_hits is not None:
            items.append(("coverage_hits", self.coverage_hits))
        return items


def predictive_moments(mu: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the NB mixture over draws (axis 0).

    ``psi`` has one value per draw.
    """
    shape = (-1,) + (1,) * (mu.ndim - 1)
    psi = np.asarray(psi, dtype=float).reshape(shape)
    mean = mu.mean(axis=0)
    var = np.mean(mu + mu**2 / psi, axis=0) + mu.var(axis=0)
    return mean, var


def score_fit(
    samples: PosteriorSamples,
    data: PanelData,
    weights: SpatialWeights,
    rng: np.random.Generator,
) -> ScoreReport:
    """WAIC plus in-sample posterior-predictive RPS and DSS.

    One replicate ``y_rep ~ NB(mu_it, psi)`` is drawn per retained draw for
    the RPS; the DSS uses the exact mean and variance of the predictive
    mixture.
    """
    check_compatible(samples, data)
    if samples.pointwise is None:
        raise ScoringError("samples were stored without pointwise log-likelihood")
    pw = samples.pointwise.reshape((-1,) + samples.pointwise.shape[2:])
    w, p = waic(pw)
    mu = mean_draws(samples, data, weights)
    psi = samples.pooled("psi")
    y_rep = rng.negative_binomial(psi[:, None, None], psi[:, None, None] / (psi[:, None, None] + mu))
    y_obs = data.y[:, 1:]
    cell_rps = rps_columns(y_rep, y_obs)
    mean, var = predictive_moments(mu, psi)
    cell_dss = dss(mean, var, y_obs)
    warnings = []
    if p < 0:
        warnings.append("negative p_waic")
    return ScoreReport(
        waic=w,
        p_waic=p,
        rps_total=float(cell_rps.sum()),
        rps_mean=float(cell_rps.mean()),
        dss_total=float(cell_dss.sum()),
        dss_mean=float(cell_dss.mean()),
        rps_by_period=cell_rps.sum(axis=0),
        dss_by_period=cell_dss.sum(axis=0),
        periods=tuple(data.periods[1:]),
        warnings=warnings,
    )
