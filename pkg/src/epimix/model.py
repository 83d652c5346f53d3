"""Link-mixture autoregressive negative binomial model for area-time counts.

Four variants share the mean structure

    mu_it = rho_it * y_{i,t-1} + lambda_it * sum_j w_ij y_{j,t-1} + exp(eta_i + delta_it)

with ``eta_i = x_i * beta + u_i`` and differ in how the autoregressive
coefficients are linked to parameters:

* ``m1`` log link, ``rho_i = exp(alpha1 + f1_i)``;
* ``m2`` logit link, ``rho_i = expit(kappa1 + f3_i)``;
* ``m3`` time-varying mixture ``omega_t * exp(alpha1 + g1_i) + (1 - omega_t) * expit(kappa1 + g1_i)``;
* ``m4`` as ``m3`` but the stationary part has its own spatial effect ``g3``.

``lambda`` follows the same pattern with ``alpha2, kappa2`` and ``f2, f4`` /
``g2, g4``.  The first period is conditioned on, so every per-cell array in
this module has shape ``(n_areas, n_periods - 1)`` and column ``k`` refers to
period index ``k + 1``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .spatial_graph import SpatialWeights, spatial_lag

#: exponent cap inside the log link
LOG_LINK_CAP = 30.0

VARIANT_KINDS = ("m1", "m2", "m3", "m4")
FIELD_NAMES = ("f1", "f2", "f3", "f4", "g1", "g2", "g3", "g4")
INTERCEPTS = ("alpha1", "kappa1", "alpha2", "kappa2")

# link-argument rows: 0 log part of rho, 1 stationary part of rho,
# 2 log part of lambda, 3 stationary part of lambda
_FIELD_TARGETS = {
    "m1": {"f1": (0,), "f2": (2,)},
    "m2": {"f3": (1,), "f4": (3,)},
    "m3": {"g1": (0, 1), "g2": (2, 3)},
    "m4": {"g1": (0,), "g2": (2,), "g3": (1,), "g4": (3,)},
}


class ModelError(ValueError):
    """Raised when inputs are inconsistent with the model."""


@dataclass(frozen=True)
class PanelData:
    """Observed counts ``y`` (areas x periods) and a centred area covariate ``x``."""

    y: np.ndarray
    x: np.ndarray
    holdout: np.ndarray | None = None
    area_ids: tuple[str, ...] | None = None
    periods: tuple | None = None
    population: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise ModelError("y must be an (areas, periods) array")
        if np.any(y < 0) or not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise ModelError("counts must be finite nonnegative integers")
        object.__setattr__(self, "y", y.astype(np.int64))
        x = np.asarray(self.x, dtype=float)
        if x.shape != (y.shape[0],):
            raise ModelError("x must have one value per area")
        if abs(x.mean()) > 1e-9:
            raise ModelError("covariate must be centred (mean 0)")
        object.__setattr__(self, "x", x)
        if self.holdout is not None:
            h = np.asarray(self.holdout)
            if h.shape != (y.shape[0],) or np.any(h < 0):
                raise ModelError("holdout must hold one nonnegative count per area")
            object.__setattr__(self, "holdout", h.astype(np.int64))
        if self.area_ids is None:
            width = len(str(y.shape[0] - 1))
            object.__setattr__(self, "area_ids", tuple(str(i).zfill(width) for i in range(y.shape[0])))
        if self.periods is None:
            object.__setattr__(self, "periods", tuple(range(1, y.shape[1] + 1)))

    @classmethod
    def from_population(cls, y, population=None, **kwargs) -> PanelData:
        """Build from raw populations: divided by 100,000 and mean-centred."""
        y = np.asarray(y)
        if population is None:
            x = np.zeros(y.shape[0])
        else:
            population = np.asarray(population, dtype=float)
            x = center_covariate(population)
        return cls(y=y, x=x, population=population, **kwargs)

    @property
    def n_areas(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def totals(self) -> np.ndarray:
        """Region-wide totals per period."""
        return self.y.sum(axis=0)


def center_covariate(population) -> np.ndarray:
    scaled = np.asarray(population, dtype=float) / 1e5
    return scaled - scaled.mean()


@dataclass(frozen=True)
class ModelVariant:
    kind: str
    stationary_range: str = "unit"

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in VARIANT_KINDS:
            raise ModelError(f"unknown variant {self.kind!r}; expected one of {VARIANT_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.stationary_range not in ("unit", "signed"):
            raise ModelError("stationary_range must be 'unit' or 'signed'")
        if self.stationary_range == "signed" and kind == "m1":
            raise ModelError("m1 has no stationary component; signed range is meaningless")

    @property
    def is_mixture(self) -> bool:
        return self.kind in ("m3", "m4")

    @property
    def has_log(self) -> bool:
        return self.kind != "m2"

    @property
    def has_stationary(self) -> bool:
        return self.kind != "m1"

    @property
    def signed(self) -> bool:
        return self.stationary_range == "signed"

    @property
    def car_fields(self) -> tuple[str, ...]:
        return tuple(_FIELD_TARGETS[self.kind])

    def field_targets(self, name: str) -> tuple[int, ...]:
        """Link-argument rows a CAR field feeds (see module docstring)."""
        return _FIELD_TARGETS[self.kind][name]

    @property
    def intercepts(self) -> tuple[str, ...]:
        rows = sorted({r for t in _FIELD_TARGETS[self.kind].values() for r in t})
        return tuple(INTERCEPTS[r] for r in rows)

    @property
    def precisions(self) -> tuple[str, ...]:
        return self.car_fields + ("u",)


@dataclass
class LatentState:
    """One full parameter configuration.

    ``f`` and ``g`` hold the eight CAR fields row-wise (``f[0]`` is f1);
    unused rows stay at zero.  ``omega``, ``q1`` and ``q2`` have one entry per
    modelled period (index ``k`` is period ``k + 1``) and are ``None`` for the
    non-mixture variants.  ``tau`` maps CAR field names (and ``"u"``) to their
    ICAR precisions.
    """

    alpha1: float
    alpha2: float
    kappa1: float
    kappa2: float
    beta: float
    psi: float
    sigma2_delta: float
    u: np.ndarray
    delta: np.ndarray
    f: np.ndarray
    g: np.ndarray
    tau: dict = field(default_factory=dict)
    omega: np.ndarray | None = None
    q1: np.ndarray | None = None
    q2: np.ndarray | None = None

    @property
    def n_areas(self) -> int:
        return self.u.shape[0]

    @property
    def n_periods(self) -> int:
        return self.delta.shape[1]

    def field(self, name: str) -> np.ndarray:
        if name == "u":
            return self.u
        idx = int(name[1]) - 1
        return self.f[idx] if name[0] == "f" else self.g[idx]

    def intercept_vector(self) -> np.ndarray:
        return np.array([self.alpha1, self.kappa1, self.alpha2, self.kappa2])

    def copy(self) -> LatentState:
        out = dataclasses.replace(self)
        for name in ("u", "delta", "f", "g", "omega", "q1", "q2"):
            value = getattr(self, name)
            if value is not None:
                setattr(out, name, value.copy())
        out.tau = dict(self.tau)
        return out


@dataclass(frozen=True)
class LinkCoefficients:
    """Autoregressive coefficients per area and modelled period."""

    rho: np.ndarray
    lam: np.ndarray


def initial_state(variant: ModelVariant, n_areas: int, n_periods: int) -> LatentState:
    """Default starting point: zero effects, omega = 0.1, psi = 10, unit precisions."""
    mix = variant.is_mixture
    n_mod = n_periods - 1
    return LatentState(
        alpha1=0.0,
        alpha2=0.0,
        kappa1=0.0,
        kappa2=0.0,
        beta=0.0,
        psi=10.0,
        sigma2_delta=1.0,
        u=np.zeros(n_areas),
        delta=np.zeros((n_areas, n_periods)),
        f=np.zeros((4, n_areas)),
        g=np.zeros((4, n_areas)),
        tau={name: 1.0 for name in variant.precisions},
        omega=np.full(n_mod, 0.1) if mix else None,
        q1=np.ones(n_mod) if mix else None,
        q2=np.ones(n_mod) if mix else None,
    )


def expit(h):
    """Inverse logit, stable for large ``|h|``."""
    h = np.asarray(h, dtype=float)
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def signed_expit(h):
    """``2 * expit(h) - 1``, mapping the real line onto (-1, 1)."""
    h = np.asarray(h, dtype=float)
    out = np.tanh(h / 2.0)
    return out if out.ndim else float(out)


def link_arguments(variant: ModelVariant, state: LatentState) -> tuple[np.ndarray, np.ndarray]:
    """Per-area link arguments and the effective mixture weight per period.

    Returns ``args`` of shape ``(4, n_areas)`` (rows as in the module
    docstring) and ``omega_eff`` of length ``n_periods - 1``: 1 for ``m1``, 0
    for ``m2`` and ``omega`` for the mixtures.
    """
    n_mod = state.n_periods - 1
    if variant.is_mixture:
        if state.omega is None or state.omega.shape != (n_mod,):
            raise ModelError(f"variant {variant.kind} needs omega with {n_mod} entries")
        omega_eff = np.asarray(state.omega, dtype=float)
    else:
        omega_eff = np.full(n_mod, 1.0 if variant.kind == "m1" else 0.0)
    args = np.tile(state.intercept_vector()[:, None], (1, state.n_areas))
    for name in variant.car_fields:
        for row in variant.field_targets(name):
            args[row] += state.field(name)
    return args, omega_eff


def _component(a, b, omega_eff, signed):
    log_part = np.exp(np.minimum(a, LOG_LINK_CAP))
    stat_part = signed_expit(b) if signed else expit(b)
    log_part = np.atleast_1d(log_part)
    stat_part = np.atleast_1d(stat_part)
    return omega_eff[None, :] * log_part[:, None] + (1.0 - omega_eff[None, :]) * stat_part[:, None]


def link_coefficients(variant: ModelVariant, state: LatentState) -> LinkCoefficients:
    """Compute ``rho_it`` and ``lambda_it`` for every area and modelled period."""
    args, omega_eff = link_arguments(variant, state)
    rho = _component(args[0], args[1], omega_eff, variant.signed)
    lam = _component(args[2], args[3], omega_eff, variant.signed)
    return LinkCoefficients(rho=rho, lam=lam)


def linear_predictor(state: LatentState, data: PanelData) -> np.ndarray:
    """``eta_i + delta_it`` for modelled periods, shape ``(n_areas, n_periods - 1)``."""
    eta = data.x * state.beta + state.u
    return eta[:, None] + state.delta[:, 1:]


def mean_intensity(state, coeffs: LinkCoefficients, weights: SpatialWeights, data: PanelData, i: int, t: int) -> float:
    """Mean ``mu_it`` for area ``i`` at period index ``t`` (0-based, ``t >= 1``)."""
    if t < 1 or t >= data.n_periods:
        raise ModelError(f"period index {t} is not modelled (valid: 1..{data.n_periods - 1})")
    y = data.y
    lag = sum(w * y[j, t - 1] for j, w in weights.row(i))
    endemic = np.exp(data.x[i] * state.beta + state.u[i] + state.delta[i, t])
    mu = coeffs.rho[i, t - 1] * y[i, t - 1] + coeffs.lam[i, t - 1] * lag + endemic
    if not np.isfinite(mu):
        raise ModelError(f"non-finite mean at area {i}, period {t}")
    return float(mu)


def mean_intensities(state, variant, weights, data, coeffs=None) -> np.ndarray:
    """All modelled means, shape ``(n_areas, n_periods - 1)``."""
    if coeffs is None:
        coeffs = link_coefficients(variant, state)
    y_prev = data.y[:, :-1].astype(float)
    lag = spatial_lag(weights, y_prev)
    with np.errstate(over="ignore"):  # overflow surfaces as inf and is rejected downstream
        return coeffs.rho * y_prev + coeffs.lam * lag + np.exp(linear_predictor(state, data))


def nb_log_pmf(y, mu, psi):
    """Negative binomial log-pmf with mean ``mu`` and dispersion ``psi``.

    Variance is ``mu + mu**2 / psi``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(mu <= 0) or np.any(psi <= 0):
        raise ModelError("nb_log_pmf needs mu > 0 and psi > 0")
    if np.any(y < 0):
        raise ModelError("nb_log_pmf needs y >= 0")
    out = (
        gammaln(y + psi)
        - gammaln(psi)
        - gammaln(y + 1.0)
        + psi * (np.log(psi) - np.log(mu + psi))
        + y * (np.log(mu) - np.log(mu + psi))
    )
    return out if out.ndim else float(out)


def log_likelihood(state, variant, weights, data) -> tuple[float, np.ndarray]:
    """Total log-likelihood over modelled cells plus the pointwise matrix."""
    mu = mean_intensities(state, variant, weights, data)
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise ModelError("mean intensity is non-finite or nonpositive")
    pointwise = nb_log_pmf(data.y[:, 1:], mu, state.psi)
    return float(pointwise.sum()), pointwise


@dataclass(frozen=True)
class Exceedance:
    """Indicators ``r_it = 1[rho_it > 1]``, ``l_it = 1[lambda_it > 1]`` and their per-period sums."""

    r: np.ndarray
    l: np.ndarray
    R: np.ndarray
    L: np.ndarray


def exceedance_stats(coeffs: LinkCoefficients) -> Exceedance:
    r = (coeffs.rho > 1.0).astype(np.int64)
    l = (coeffs.lam > 1.0).astype(np.int64)
    return Exceedance(r=r, l=l, R=r.sum(axis=0), L=l.sum(axis=0))


def summary_coefficients(coeffs: LinkCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """Area-averaged coefficients per period."""
    return coeffs.rho.mean(axis=0), coeffs.lam.mean(axis=0)
