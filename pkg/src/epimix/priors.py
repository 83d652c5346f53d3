"""Prior log-densities and the unnormalised log-posterior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .model import LatentState, ModelError, ModelVariant, PanelData, log_likelihood
from .spatial_graph import AdjacencyGraph, SpatialWeights, connected_components

LOG_2PI = np.log(2.0 * np.pi)


class PriorError(ValueError):
    """Raised for arguments outside a density's support."""


@dataclass(frozen=True)
class PriorConfig:
    gamma_shape: float = 1.0
    gamma_rate: float = 0.01
    normal_var_fixed: float = 100.0
    delta_init_var: float = 1.0

    def __post_init__(self):
        for name in ("gamma_shape", "gamma_rate", "normal_var_fixed", "delta_init_var"):
            if not getattr(self, name) > 0:
                raise PriorError(f"{name} must be positive")


def normal_log_density(x, var: float, mean=0.0) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var))


def gamma_log_density(x, shape: float, rate: float) -> float:
    """Gamma(shape, rate) log-density summed over ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise PriorError("gamma density needs positive arguments")
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x))


def icar_log_density(f, graph: AdjacencyGraph, tau: float, labels=None) -> float:
    """Intrinsic CAR log-density up to a constant.

    ``-(tau/2) * sum_{i~j} (f_i - f_j)^2 + ((N - n_components)/2) * log(tau)``
    with each edge counted once.  ``f`` must sum to zero within every
    connected component.
    """
    if not tau > 0:
        raise PriorError(f"ICAR precision must be positive, got {tau}")
    f = np.asarray(f, dtype=float)
    if labels is None:
        labels = connected_components(graph)
    n_comp = int(labels.max()) + 1
    sums = np.bincount(labels, weights=f, minlength=n_comp)
    if np.any(np.abs(sums) > 1e-8):
        raise PriorError("CAR field must sum to zero within each component")
    edges = np.array(graph.edges(), dtype=np.int64).reshape(-1, 2)
    quad = float(np.sum((f[edges[:, 0]] - f[edges[:, 1]]) ** 2))
    rank = graph.n_areas - n_comp
    return -0.5 * tau * quad + 0.5 * rank * np.log(tau)


def icar_quadratic(f, graph: AdjacencyGraph) -> float:
    edges = np.array(graph.edges(), dtype=np.int64).reshape(-1, 2)
    f = np.asarray(f, dtype=float)
    return float(np.sum((f[edges[:, 0]] - f[edges[:, 1]]) ** 2))


def rw1_log_density(delta, sigma2: float, init_var: float = 1.0) -> float:
    """First-order random walk with a Normal(0, init_var) start.

    ``delta`` may be one series or an ``(areas, periods)`` array; rows are
    independent walks and the result is summed.
    """
    if not sigma2 > 0:
        raise PriorError(f"random-walk variance must be positive, got {sigma2}")
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    start = normal_log_density(delta[:, 0], init_var)
    steps = normal_log_density(np.diff(delta, axis=1), sigma2)
    return start + steps


def omega_log_density(omega, q1, q2) -> float:
    """Beta(q1, q2) log-density at ``omega`` (summed if arrays)."""
    omega = np.asarray(omega, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    if np.any(omega <= 0) or np.any(omega >= 1):
        raise PriorError("omega must lie strictly inside (0, 1)")
    if np.any(q1 <= 0) or np.any(q2 <= 0):
        raise PriorError("beta parameters must be positive")
    out = gammaln(q1 + q2) - gammaln(q1) - gammaln(q2) + (q1 - 1) * np.log(omega) + (q2 - 1) * np.log1p(-omega)
    return float(np.sum(out))


def log_posterior_blocks(
    state: LatentState,
    variant: ModelVariant,
    weights: SpatialWeights,
    data: PanelData,
    graph: AdjacencyGraph,
    config: PriorConfig = PriorConfig(),
) -> dict[str, float]:
    """Named additive pieces of the log-posterior.

    Variance parameters are given their Gamma prior on the precision scale:
    the ``sigma2_delta`` block is the Gamma log-density of ``1/sigma2_delta``.
    """
    a, b = config.gamma_shape, config.gamma_rate
    labels = connected_components(graph)
    blocks: dict[str, float] = {}
    try:
        blocks["likelihood"] = log_likelihood(state, variant, weights, data)[0]
    except ModelError:
        blocks["likelihood"] = -np.inf
    for name in variant.car_fields + ("u",):
        tau = state.tau[name]
        blocks[f"icar:{name}"] = icar_log_density(state.field(name), graph, tau, labels)
        blocks[f"tau:{name}"] = gamma_log_density(tau, a, b)
    blocks["rw1:delta"] = rw1_log_density(state.delta, state.sigma2_delta, config.delta_init_var)
    blocks["tau:delta"] = gamma_log_density(1.0 / state.sigma2_delta, a, b)
    blocks["psi"] = gamma_log_density(state.psi, a, b)
    for name in variant.intercepts + ("beta",):
        blocks[name] = normal_log_density(getattr(state, name), config.normal_var_fixed)
    if variant.is_mixture:
        blocks["omega"] = omega_log_density(state.omega, state.q1, state.q2)
        blocks["q"] = gamma_log_density(state.q1, a, b) + gamma_log_density(state.q2, a, b)
    return blocks


def total_log_posterior(state, variant, weights, data, graph, config: PriorConfig = PriorConfig()) -> float:
    """Log-likelihood plus every prior block.

    Raises
    ------
    PriorError
        If any block is non-finite; the message names the block.
    """
    blocks = log_posterior_blocks(state, variant, weights, data, graph, config)
    for name, value in blocks.items():
        if not np.isfinite(value):
            raise PriorError(f"non-finite log-posterior block {name!r}")
    return float(sum(blocks.values()))
