"""Vectorised quantities over pooled posterior draws."""

from __future__ import annotations

import numpy as np

from .model import INTERCEPTS, LOG_LINK_CAP, ModelVariant, PanelData, expit, signed_expit
from .sampler import PosteriorSamples
from .spatial_graph import SpatialWeights, spatial_lag


def link_arguments_draws(samples: PosteriorSamples) -> np.ndarray:
    """Link arguments per draw, shape ``(draws, 4, n_areas)`` (rows as in :mod:`epimix.model`)."""
    variant = samples.variant
    n_areas = samples.get("u").shape[-1]
    n_draws = samples.n_chains * samples.n_draws
    args = np.zeros((n_draws, 4, n_areas))
    for row, name in enumerate(INTERCEPTS):
        if samples.has(name):
            args[:, row, :] += samples.pooled(name)[:, None]
    for name in variant.car_fields:
        f = samples.pooled(name)
        for row in variant.field_targets(name):
            args[:, row, :] += f
    return args


def omega_draws(samples: PosteriorSamples, n_periods: int) -> np.ndarray:
    """Effective mixture weight per draw and modelled period, ``(draws, n_periods - 1)``."""
    n_draws = samples.n_chains * samples.n_draws
    if samples.variant.is_mixture:
        return samples.pooled("omega")
    value = 1.0 if samples.variant.kind == "m1" else 0.0
    return np.full((n_draws, n_periods - 1), value)


def _parts(a, b, signed):
    log_part = np.exp(np.minimum(a, LOG_LINK_CAP))
    stat_part = signed_expit(b) if signed else expit(b)
    return log_part, stat_part


def coefficient_draws(samples: PosteriorSamples, n_periods: int, omega=None) -> tuple[np.ndarray, np.ndarray]:
    """``rho`` and ``lambda`` per draw, each ``(draws, n_areas, k)``.

    ``omega`` defaults to the sampled effective weights (``k = n_periods - 1``);
    pass a ``(draws, k)`` array to evaluate the links at other weights.
    """
    args = link_arguments_draws(samples)
    if omega is None:
        omega = omega_draws(samples, n_periods)
    omega = np.asarray(omega, dtype=float)[:, None, :]
    signed = samples.variant.signed
    out = []
    for a, b in ((0, 1), (2, 3)):
        log_part, stat_part = _parts(args[:, a, :], args[:, b, :], signed)
        out.append(omega * log_part[:, :, None] + (1.0 - omega) * stat_part[:, :, None])
    return out[0], out[1]


def endemic_draws(samples: PosteriorSamples, data: PanelData) -> np.ndarray:
    """``exp(x_i beta + u_i + delta_it)`` for modelled periods, ``(draws, n_areas, T - 1)``."""
    eta = data.x[None, :] * samples.pooled("beta")[:, None] + samples.pooled("u")
    return np.exp(eta[:, :, None] + samples.pooled("delta")[:, :, 1:])


def mean_draws(samples: PosteriorSamples, data: PanelData, weights: SpatialWeights) -> np.ndarray:
    """In-sample means ``mu_it`` per draw, ``(draws, n_areas, T - 1)``."""
    rho, lam = coefficient_draws(samples, data.n_periods)
    y_prev = data.y[:, :-1].astype(float)
    lag = spatial_lag(weights, y_prev)
    return rho * y_prev + lam * lag + endemic_draws(samples, data)


def check_compatible(samples: PosteriorSamples, data: PanelData, variant: ModelVariant | None = None) -> None:
    delta = samples.get("delta")
    if delta.shape[-2:] != data.y.shape:
        raise ValueError(f"samples cover {delta.shape[-2:]} cells but data has {data.y.shape}")
    if variant is not None and variant != samples.variant:
        raise ValueError(f"samples are for {samples.variant.kind}, not {variant.kind}")
