"""Synthetic panels drawn from the link-mixture model with known parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import LatentState, ModelError, ModelVariant, PanelData, center_covariate, initial_state, link_coefficients
from .spatial_graph import AdjacencyGraph, build_graph, connected_components, row_standardize, spatial_lag, torus_graph


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    """Generating process for one synthetic panel.

    Periods are numbered from 1.  ``epidemic_windows`` lists inclusive
    ``(first, last)`` period ranges where ``omega_t = omega_high``; elsewhere
    ``omega_t = omega_low``.  An explicit ``omega_schedule`` (one value per
    period ``2..T+1``) overrides the windows.  Period ``n_periods + 1`` is
    generated as the holdout.
    """

    variant: str = "m4"
    stationary_range: str = "unit"
    n_rows: int = 4
    n_cols: int = 5
    edges: list | None = None
    n_areas: int | None = None
    n_periods: int = 40
    seed: int = 20240601
    alpha1: float = float(np.log(1.1))
    alpha2: float = float(np.log(0.45))
    kappa1: float = 0.0
    kappa2: float = float(np.log(0.35 / 0.65))
    beta: float = 0.2
    psi: float = 100.0
    sigma2_delta: float = 0.0025
    tau_fields: float = 25.0
    tau_u: float = 10.0
    delta_level: float = 1.5
    delta_init_sd: float = 0.1
    omega_low: float = 0.05
    omega_high: float = 0.95
    epidemic_windows: list = field(default_factory=lambda: [(12, 16), (28, 33)])
    omega_schedule: list | None = None
    population_low: float = 50_000.0
    population_high: float = 350_000.0
    initial_mean: float = 35.0

    def graph(self) -> AdjacencyGraph:
        if self.edges is not None:
            if self.n_areas is None:
                raise ScenarioError("n_areas is required with explicit edges")
            return build_graph(self.edges, self.n_areas)
        return torus_graph(self.n_rows, self.n_cols)

    def schedule(self) -> np.ndarray:
        """True omega for periods ``2..T+1`` (length ``n_periods``)."""
        if self.omega_schedule is not None:
            omega = np.asarray(self.omega_schedule, dtype=float)
            if omega.shape != (self.n_periods,):
                raise ScenarioError(f"omega_schedule needs {self.n_periods} values (periods 2..T+1)")
        else:
            periods = np.arange(2, self.n_periods + 2)
            omega = np.full(self.n_periods, self.omega_low)
            for first, last in self.epidemic_windows:
                omega[(periods >= first) & (periods <= last)] = self.omega_high
        if np.any(omega <= 0) or np.any(omega >= 1):
            raise ScenarioError("omega schedule must lie strictly inside (0, 1)")
        return omega


def sample_icar(graph: AdjacencyGraph, tau: float, rng) -> np.ndarray:
    """Draw an intrinsic CAR field, centred within each component."""
    lap = np.diag(graph.degrees.astype(float)) - graph.adjacency_matrix()
    vals, vecs = np.linalg.eigh(lap)
    keep = vals > 1e-9
    z = rng.standard_normal(keep.sum())
    field_ = vecs[:, keep] @ (z / np.sqrt(tau * vals[keep]))
    labels = connected_components(graph)
    means = np.bincount(labels, weights=field_) / np.bincount(labels)
    return field_ - means[labels]


def sample_nb(rng, mu, psi):
    """Negative binomial draws with mean ``mu`` and dispersion ``psi``."""
    mu = np.asarray(mu, dtype=float)
    return rng.negative_binomial(psi, psi / (psi + mu))


def simulate_panel(scenario: Scenario) -> tuple[PanelData, LatentState, AdjacencyGraph]:
    """Generate counts for periods ``1..T+1``; the last period is the holdout.

    Returns the panel (with ``holdout``), the true state restricted to the
    observed periods, and the adjacency graph.
    """
    rng = np.random.default_rng(scenario.seed)
    variant = ModelVariant(scenario.variant, scenario.stationary_range)
    graph = scenario.graph()
    weights = row_standardize(graph)
    n, t = graph.n_areas, scenario.n_periods
    t_all = t + 1

    population = rng.uniform(scenario.population_low, scenario.population_high, n)
    x = center_covariate(population)
    truth = initial_state(variant, n, t_all)
    truth.alpha1, truth.alpha2 = scenario.alpha1, scenario.alpha2
    truth.kappa1, truth.kappa2 = scenario.kappa1, scenario.kappa2
    truth.beta, truth.psi, truth.sigma2_delta = scenario.beta, scenario.psi, scenario.sigma2_delta
    for name in variant.car_fields:
        truth.field(name)[:] = sample_icar(graph, scenario.tau_fields, rng)
        truth.tau[name] = scenario.tau_fields
    truth.u[:] = sample_icar(graph, scenario.tau_u, rng)
    truth.tau["u"] = scenario.tau_u
    steps = rng.standard_normal((n, t_all - 1)) * np.sqrt(scenario.sigma2_delta)
    start = scenario.delta_level + scenario.delta_init_sd * rng.standard_normal(n)
    truth.delta = np.concatenate([start[:, None], start[:, None] + np.cumsum(steps, axis=1)], axis=1)
    omega = scenario.schedule()
    if variant.is_mixture:
        truth.omega = omega.copy()
        truth.q1 = 20.0 * omega
        truth.q2 = 20.0 * (1.0 - omega)

    coeffs = link_coefficients(variant, truth)
    y = np.zeros((n, t_all), dtype=np.int64)
    y[:, 0] = rng.poisson(scenario.initial_mean, n)
    endemic = np.exp((x * truth.beta + truth.u)[:, None] + truth.delta)
    for k in range(1, t_all):
        prev = y[:, k - 1].astype(float)
        mu = coeffs.rho[:, k - 1] * prev + coeffs.lam[:, k - 1] * spatial_lag(weights, prev) + endemic[:, k]
        if not np.all(np.isfinite(mu)) or np.any(mu > 1e12):
            raise ModelError(f"simulated mean overflows at period {k + 1}; scenario too explosive")
        if np.any(mu <= 0):
            raise ModelError(f"nonpositive simulated mean at period {k + 1}")
        y[:, k] = sample_nb(rng, mu, truth.psi)

    observed = truth.copy()
    observed.delta = truth.delta[:, :t].copy()
    if variant.is_mixture:
        observed.omega, observed.q1, observed.q2 = omega[: t - 1].copy(), truth.q1[: t - 1].copy(), truth.q2[: t - 1].copy()
    width = len(str(n - 1))
    data = PanelData(
        y=y[:, :t],
        x=x,
        holdout=y[:, t],
        area_ids=tuple(str(i).zfill(width) for i in range(n)),
        periods=tuple(range(1, t + 1)),
        population=population,
    )
    return data, observed, graph


# ---------------------------------------------------------------- config text

_INT_KEYS = {"n_rows", "n_cols", "n_areas", "n_periods", "seed"}
_STR_KEYS = {"variant", "stationary_range"}


def _parse_windows(text: str) -> list[tuple[int, int]]:
    windows = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        first, _, last = part.partition("-")
        try:
            windows.append((int(first), int(last or first)))
        except ValueError:
            raise ScenarioError(f"bad epidemic window {part!r}; expected 'first-last'") from None
    return windows


def read_edge_list(path) -> list[tuple[int, int]]:
    """``i j`` lines of 0-based area indices (``#`` comments allowed)."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except (IndexError, ValueError):
            raise ScenarioError(f"{path}:{lineno}: expected 'i j', got {text!r}") from None
    return edges


def scenario_from_mapping(values: dict[str, str]) -> Scenario:
    """Build a scenario from string key/values (a ``[truth]`` config section).

    ``epidemic_windows`` reads as ``"12-16, 28-33"``, ``omega_schedule`` as a
    comma-separated list and ``adjacency`` as a path to an edge list of
    0-based indices (used together with ``n_areas``).
    """
    known = {f.name for f in fields(Scenario)}
    kwargs: dict = {}
    for key, raw in values.items():
        text = str(raw).strip()
        if key == "adjacency":
            if text:
                kwargs["edges"] = read_edge_list(text)
            continue
        if key not in known or key == "edges":
            raise ScenarioError(f"unknown scenario key {key!r}")
        if text == "":
            continue
        try:
            if key == "epidemic_windows":
                kwargs[key] = _parse_windows(text)
            elif key == "omega_schedule":
                kwargs[key] = [float(v) for v in text.split(",") if v.strip()]
            elif key in _INT_KEYS:
                kwargs[key] = int(text)
            elif key in _STR_KEYS:
                kwargs[key] = text
            else:
                kwargs[key] = float(text)
        except ValueError:
            raise ScenarioError(f"scenario key {key!r}: cannot parse {text!r}") from None
    return Scenario(**kwargs)


def scenario_to_mapping(scenario: Scenario) -> dict[str, str]:
    out = {}
    for f in fields(Scenario):
        value = getattr(scenario, f.name)
        if f.name == "edges":
            continue
        if value is None:
            out[f.name] = ""
        elif f.name == "epidemic_windows":
            out[f.name] = ", ".join(f"{a}-{b}" for a, b in value)
        elif f.name == "omega_schedule":
            out[f.name] = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            out[f.name] = repr(value)
        else:
            out[f.name] = str(value)
    return out
