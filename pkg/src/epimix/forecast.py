"""One-step-ahead posterior-predictive forecasts and growth ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import summarize_columns
from .model import ModelVariant, PanelData
from .posterior import check_compatible, coefficient_draws
from .sampler import PosteriorSamples
from .spatial_graph import SpatialWeights, spatial_lag

OMEGA_MODES = ("carry", "beta")


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastDraws:
    """Predictive draws for period ``T + 1``.

    ``areas`` has shape ``(draws, n_areas)``; ``totals`` is its row sum.
    ``mu`` holds the predictive means each count was drawn around.
    """

    areas: np.ndarray
    totals: np.ndarray
    mu: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.areas.shape[0]

    def area_summary(self) -> np.ndarray:
        """``(n_areas, 5)``: mean, sd, q2.5, q50, q97.5."""
        return summarize_columns(self.areas)

    def total_summary(self) -> np.ndarray:
        return summarize_columns(self.totals[:, None])[0]

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.totals, [a, 1.0 - a], method="linear")
        return float(lo), float(hi)


def one_step_ahead(
    samples: PosteriorSamples,
    data: PanelData,
    variant: ModelVariant,
    weights: SpatialWeights,
    rng: np.random.Generator,
    omega_mode: str = "carry",
) -> ForecastDraws:
    """Draw ``y_{i,T+1}`` once per retained posterior draw.

    Each draw steps ``delta_{i,T+1} ~ N(delta_iT, sigma2_delta)``, evaluates
    ``mu_{i,T+1} = rho * y_iT + lambda * lag_iT + exp(eta_i + delta_{i,T+1})``
    and samples NB(mu, psi).  Mixture variants evaluate the links at
    ``omega_T`` (``omega_mode="carry"``) or at a fresh
    ``Beta(q1_T, q2_T)`` draw (``omega_mode="beta"``).
    """
    if samples.n_draws == 0:
        raise ForecastError("no posterior draws")
    if data.n_periods < 2:
        raise ForecastError("need at least two periods")
    if omega_mode not in OMEGA_MODES:
        raise ForecastError(f"omega_mode must be one of {OMEGA_MODES}")
    check_compatible(samples, data, variant)
    n_draws = samples.n_chains * samples.n_draws
    if variant.is_mixture:
        omega = samples.pooled("omega")[:, -1]
        if omega_mode == "beta":
            omega = rng.beta(samples.pooled("q1")[:, -1], samples.pooled("q2")[:, -1])
            omega = np.clip(omega, 1e-12, 1.0 - 1e-12)
    else:
        omega = np.full(n_draws, 1.0 if variant.kind == "m1" else 0.0)
    rho, lam = coefficient_draws(samples, data.n_periods, omega=omega[:, None])
    rho, lam = rho[:, :, 0], lam[:, :, 0]

    delta_t = samples.pooled("delta")[:, :, -1]
    sd = np.sqrt(samples.pooled("sigma2_delta"))
    delta_next = delta_t + sd[:, None] * rng.standard_normal(delta_t.shape)
    eta = data.x[None, :] * samples.pooled("beta")[:, None] + samples.pooled("u")
    y_last = data.y[:, -1].astype(float)
    lag = spatial_lag(weights, y_last)
    mu = rho * y_last[None, :] + lam * lag[None, :] + np.exp(eta + delta_next)
    if not np.all(np.isfinite(mu)):
        raise ForecastError("non-finite predictive mean")
    psi = samples.pooled("psi")[:, None]
    areas = rng.negative_binomial(psi, psi / (psi + mu)).astype(np.int64)
    return ForecastDraws(areas=areas, totals=areas.sum(axis=1), mu=mu)


def growth_ratios(totals) -> np.ndarray:
    """``Y_t / Y_{t-1}`` for ``t = 2..T``; ``nan`` where ``Y_{t-1} = 0``.

    Accepts a :class:`PanelData` or a series of region totals.
    """
    if isinstance(totals, PanelData):
        totals = totals.totals
    y = np.asarray(totals, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ForecastError("need a series of at least two totals")
    prev = y[:-1]
    out = np.full(prev.shape, np.nan)
    np.divide(y[1:], prev, out=out, where=prev > 0)
    return out
