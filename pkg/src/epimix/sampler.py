"""Adaptive random-walk Metropolis-within-Gibbs sampler.

Each sweep visits, in order: the fixed-effect scalars one at a time and
jointly, a likelihood-preserving ``beta``/``delta`` exchange, every CAR field
site by site, the ``delta`` random walk (single sites, whole rows and
trailing segments from a random start), the mixture weights and their Beta
hyperparameters, and finally the precisions (drawn from their Gamma full
conditionals).  Positive parameters move on the
log scale and ``omega`` on the logit scale, with Jacobian terms.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import _kernels as K
from .model import (
    FIELD_NAMES,
    INTERCEPTS,
    LatentState,
    ModelVariant,
    PanelData,
    initial_state,
)
from .priors import PriorConfig
from .spatial_graph import SpatialWeights, connected_components, spatial_lag

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """Raised when the sampler cannot start or produces an invalid state."""


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    n_iterations: int = 20_000
    n_burnin: int = 10_000
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    target_accept_block: float = 0.234
    jitter: float = 0.1
    store_pointwise: bool = True
    workers: int | None = None
    max_init_tries: int = 50

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if not 0 <= self.n_burnin < self.n_iterations:
            raise ValueError("burn-in must be shorter than the run")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return len(range(self.n_burnin, self.n_iterations, self.thin))


# ---------------------------------------------------------------- layout


def parameter_layout(variant: ModelVariant, n_areas: int, n_periods: int) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` pairs of the stored parameters."""
    layout = [(name, ()) for name in variant.intercepts]
    layout += [("beta", ()), ("psi", ()), ("sigma2_delta", ())]
    layout += [(f"tau_{name}", ()) for name in variant.precisions]
    layout += [(name, (n_areas,)) for name in variant.car_fields]
    layout += [("u", (n_areas,)), ("delta", (n_areas, n_periods))]
    if variant.is_mixture:
        layout += [(name, (n_periods - 1,)) for name in ("omega", "q1", "q2")]
    return layout


def element_names(layout) -> list[str]:
    """Flat parameter names; periods are 0-based period indices (omega starts at 1)."""
    names = []
    for name, shape in layout:
        if shape == ():
            names.append(name)
        elif name == "delta":
            names.extend(f"delta[{i},{t}]" for i in range(shape[0]) for t in range(shape[1]))
        elif name in ("omega", "q1", "q2"):
            names.extend(f"{name}[{k + 1}]" for k in range(shape[0]))
        else:
            names.extend(f"{name}[{i}]" for i in range(shape[0]))
    return names


def flatten_state(state: LatentState, layout) -> np.ndarray:
    parts = []
    for name, _ in layout:
        if name.startswith("tau_"):
            parts.append([state.tau[name[4:]]])
        elif name in FIELD_NAMES:
            parts.append(state.field(name))
        else:
            parts.append(np.ravel(getattr(state, name)))
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unflatten_state(vector, layout, variant: ModelVariant) -> LatentState:
    n_areas = next(shape for name, shape in layout if name == "delta")[0]
    n_periods = next(shape for name, shape in layout if name == "delta")[1]
    state = initial_state(variant, n_areas, n_periods)
    pos = 0
    for name, shape in layout:
        size = int(np.prod(shape)) if shape else 1
        chunk = np.asarray(vector[pos : pos + size], dtype=float)
        pos += size
        if shape == ():
            if name.startswith("tau_"):
                state.tau[name[4:]] = float(chunk[0])
            else:
                setattr(state, name, float(chunk[0]))
        elif name in FIELD_NAMES:
            state.field(name)[:] = chunk
        else:
            setattr(state, name, chunk.reshape(shape).copy())
    return state


# ---------------------------------------------------------------- samples


@dataclass
class PosteriorSamples:
    """Retained draws of every chain.

    ``draws`` has shape ``(chains, draws, parameters)`` with columns named by
    ``names``; ``pointwise`` holds the per-cell log-likelihood of each draw,
    shape ``(chains, draws, areas, periods - 1)``.
    """

    variant: ModelVariant
    layout: list
    names: list[str]
    draws: np.ndarray
    pointwise: np.ndarray | None
    acceptance: dict[str, np.ndarray]
    config: SamplerConfig = field(default_factory=SamplerConfig)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def trace(self, name: str) -> np.ndarray:
        """One named scalar element, shape ``(chains, draws)``."""
        return self.draws[:, :, self.index(name)]

    def get(self, name: str) -> np.ndarray:
        """A whole parameter block, shape ``(chains, draws, *shape)``."""
        pos = 0
        for block, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            if block == name:
                out = self.draws[:, :, pos : pos + size]
                return out.reshape(self.draws.shape[:2] + tuple(shape))
            pos += size
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(block == name for block, _ in self.layout)

    def pooled(self, name: str) -> np.ndarray:
        arr = self.get(name)
        return arr.reshape((-1,) + arr.shape[2:])

    def state(self, chain: int, draw: int) -> LatentState:
        return unflatten_state(self.draws[chain, draw], self.layout, self.variant)


# ---------------------------------------------------------------- adaptation


def adapt_scales(ledger: dict, scales: dict, targets: dict | float = 0.44, gain: float = 1.0) -> dict:
    """Robbins-Monro nudge of proposal scales toward target acceptance.

    ``ledger`` maps block names to ``(accepted, attempts)`` counts over the
    last window (scalars or arrays); ``scales`` maps the same names to the
    current positive scales.  Each scale is multiplied by
    ``exp(gain * (rate - target))``.
    """
    out = {}
    for name, scale in scales.items():
        if name not in ledger:
            out[name] = scale
            continue
        acc, att = ledger[name]
        att = np.maximum(np.asarray(att, dtype=float), 1.0)
        rate = np.asarray(acc, dtype=float) / att
        target = targets[name] if isinstance(targets, dict) else targets
        out[name] = np.asarray(scale) * np.exp(gain * (rate - target))
    return out


# ---------------------------------------------------------------- generic step

_POSITIVE = {"psi", "sigma2_delta"}


def _parse_block(block_id: str):
    if "[" in block_id:
        name, rest = block_id.split("[", 1)
        idx = tuple(int(v) for v in rest.rstrip("]").split(","))
        return name, idx
    return block_id, ()


def update_block(state: LatentState, block_id: str, log_posterior_fn, rng, step_scale: float, labels=None):
    """One random-walk Metropolis-Hastings update of a single named block.

    ``block_id`` names a scalar (``alpha1``, ``beta``, ``psi``,
    ``tau_g1``, ...) or an element (``omega[3]``, ``q1[3]``, ``g2[4]``,
    ``u[0]``, ``delta[1,5]``; omega/q indices are period indices starting at
    1).  The proposal is Gaussian on the unconstrained scale (log for
    positive parameters, logit for ``omega``) and the Jacobian enters the
    acceptance ratio.  ``log_posterior_fn`` is read as a density in
    ``1 / sigma2_delta`` (as produced by :func:`epimix.priors.total_log_posterior`).  CAR elements are re-centred within their component
    (given by ``labels``) after the move.

    Returns ``(new_state, accepted)``; on rejection ``new_state is state``.
    """
    name, idx = _parse_block(block_id)
    new = state.copy()
    z = rng.standard_normal() * step_scale
    log_jac = 0.0
    if name in INTERCEPTS or name == "beta":
        if idx:
            raise KeyError(block_id)
        setattr(new, name, getattr(state, name) + z)
    elif name in _POSITIVE or name.startswith("tau_"):
        old = state.tau[name[4:]] if name.startswith("tau_") else getattr(state, name)
        if name.startswith("tau_") and name[4:] not in state.tau:
            raise KeyError(block_id)
        value = old * np.exp(z)
        if name.startswith("tau_"):
            new.tau[name[4:]] = value
        else:
            setattr(new, name, value)
        log_jac = np.log(value) - np.log(old)
        if name == "sigma2_delta":
            # its prior density is expressed for the precision 1 / sigma2_delta
            log_jac = -log_jac
    elif name == "omega":
        k = idx[0] - 1
        w = state.omega[k]
        h = np.log(w) - np.log1p(-w) + z
        w_new = 1.0 / (1.0 + np.exp(-h))
        new.omega[k] = w_new
        log_jac = np.log(w_new) + np.log1p(-w_new) - np.log(w) - np.log1p(-w)
    elif name in ("q1", "q2"):
        k = idx[0] - 1
        arr = getattr(new, name)
        old = arr[k]
        arr[k] = old * np.exp(z)
        log_jac = z
    elif name in FIELD_NAMES or name == "u":
        i = idx[0]
        vec = new.field(name)
        vec[i] += z
        if labels is None:
            labels = np.zeros(vec.shape[0], dtype=np.int64)
        members = labels == labels[i]
        vec[members] -= vec[members].mean()
    elif name == "delta":
        new.delta[idx] += z
    else:
        raise KeyError(f"unknown block {block_id!r}")
    lp_old = log_posterior_fn(state)
    lp_new = log_posterior_fn(new)
    log_ratio = lp_new - lp_old + log_jac
    if np.isfinite(lp_new) and np.log(rng.uniform()) < log_ratio:
        return new, True
    return state, False


# ---------------------------------------------------------------- chain


class _Chain:
    def __init__(self, data: PanelData, variant: ModelVariant, weights: SpatialWeights, prior: PriorConfig,
                 config: SamplerConfig, chain: int, init: LatentState | None, free):
        self.variant = variant
        self.prior = prior
        self.config = config
        self.rng = np.random.default_rng(config.seed + chain)
        graph = weights.graph
        if graph is None:
            raise SamplerError("spatial weights must carry their adjacency graph")
        y = data.y.astype(float)
        self.yobs = np.ascontiguousarray(y[:, 1:])
        self.yprev = np.ascontiguousarray(y[:, :-1])
        self.lag = np.ascontiguousarray(spatial_lag(weights, self.yprev))
        self.lgy1 = gammaln(self.yobs + 1.0)
        self.x = data.x
        self.n, self.t = data.y.shape
        self.indptr, self.indices = graph.csr()
        labels = connected_components(graph)
        self.comp = labels
        n_comp = int(labels.max()) + 1
        self.comp_size = np.bincount(labels, minlength=n_comp).astype(np.int64)
        order = np.argsort(labels, kind="stable")
        self.members = order.astype(np.int64)
        self.members_ptr = np.concatenate([[0], np.cumsum(self.comp_size)]).astype(np.int64)
        self.use_comp = self.comp_size > (self.n + 1) / 2.0
        self.rank = self.n - n_comp

        self.fields = variant.car_fields
        self.masks = {name: np.array([r in variant.field_targets(name) for r in range(4)]) for name in self.fields}
        self.scalars = list(variant.intercepts) + ["beta", "psi"]
        all_blocks = set(self.scalars) | set(self.fields) | {"u", "delta", "sigma2_delta"}
        all_blocks |= {f"tau_{p}" for p in variant.precisions}
        if variant.is_mixture:
            all_blocks |= {"omega", "q"}
        self.free = all_blocks if free is None else set(free)
        unknown = self.free - all_blocks
        if unknown:
            raise SamplerError(f"unknown or inactive blocks {sorted(unknown)}")
        self.free_scalars = [s for s in self.scalars if s in self.free]

        self.state = self._initial(init)
        n, t1 = self.n, self.t - 1
        self.scale = {
            "scalar": np.full(len(self.scalars), 0.1),
            "block": np.array(1.0),
            "ridge": np.array(0.1),
            "u": np.ones(n),
            "delta": np.ones((n, self.t)),
            "delta_row": np.full(n, 0.1),
            "delta_tail": np.full(n, 0.1),
            "sigma_scale": np.array(0.1),
            "omega": np.full(t1, 0.5),
            "q1": np.full(t1, 0.5),
            "q2": np.full(t1, 0.5),
            "qjoint": np.full(t1, 0.5),
        }
        for name in self.fields:
            self.scale[name] = np.ones(n)
        self._reset_window()
        self.totals: dict[str, list] = {k: [np.zeros_like(v, dtype=float), np.zeros_like(v, dtype=float)] for k, v in self.scale.items()}
        self.n_windows = 0
        d = len(self.free_scalars)
        self._cov_n = 0
        self._cov_mean = np.zeros(d)
        self._cov_m2 = np.zeros((d, d))
        self.block_chol = np.eye(d) * 0.1 / max(np.sqrt(d), 1.0)

    # -- state helpers

    def _initial(self, init):
        base = init.copy() if init is not None else initial_state(self.variant, self.n, self.t)
        for _ in range(self.config.max_init_tries):
            state = base.copy()
            jit = self.config.jitter
            for name in self.free_scalars:
                if name == "psi":
                    state.psi = float(state.psi * np.exp(jit * self.rng.standard_normal()))
                else:
                    setattr(state, name, float(getattr(state, name) + jit * self.rng.standard_normal()))
            self.state = state
            if np.isfinite(self._loglik_full()):
                return state
        raise SamplerError("could not find a finite starting point")

    def _omega_eff(self):
        s = self.state
        if self.variant.is_mixture:
            return s.omega
        return np.full(self.t - 1, 1.0 if self.variant.kind == "m1" else 0.0)

    def _field_part(self):
        part = np.zeros((4, self.n))
        for name in self.fields:
            for r in self.variant.field_targets(name):
                part[r] += self.state.field(name)
        return part

    def _args(self, icpt=None, part=None):
        if icpt is None:
            icpt = self.state.intercept_vector()
        if part is None:
            part = self._field_part()
        return part + icpt[:, None]

    def _lin(self, beta=None):
        s = self.state
        return self.x * (s.beta if beta is None else beta) + s.u

    def _loglik_mu(self, args=None, lin=None, psi=None):
        s = self.state
        return K.loglik_mu(
            self._args() if args is None else args,
            self._omega_eff(),
            self._lin() if lin is None else lin,
            s.delta, self.yobs, self.yprev, self.lag,
            s.psi if psi is None else psi,
            self.variant.signed, self.variant.has_log,
        )

    def _loglik_full(self):
        return self._loglik_mu() + K.nb_constant(self.yobs, self.state.psi)

    def _link_cache(self):
        return K.link_cache(self._args(), self.variant.signed)

    # -- windows

    def _reset_window(self):
        self.window = {k: [np.zeros_like(v, dtype=float), np.zeros_like(v, dtype=float)] for k, v in self.scale.items()}

    def _record(self, key, accepted, attempted=1.0, idx=None):
        acc, att = self.window[key]
        tot_acc, tot_att = self.totals[key]
        if idx is None:
            acc += accepted
            att += attempted
            tot_acc += accepted
            tot_att += attempted
        else:
            acc[idx] += accepted
            att[idx] += attempted
            tot_acc[idx] += accepted
            tot_att[idx] += attempted

    def _targets(self):
        t = {k: self.config.target_accept for k in self.scale}
        t["block"] = self.config.target_accept_block
        return t

    def adapt(self):
        gain = min(1.0, 2.0 / np.sqrt(self.n_windows + 1.0))
        ledger = {k: (v[0], v[1]) for k, v in self.window.items() if np.any(v[1] > 0)}
        self.scale.update(adapt_scales(ledger, self.scale, self._targets(), gain))
        self.n_windows += 1
        self._reset_window()
        d = len(self.free_scalars)
        if d >= 2 and self._cov_n > max(10 * d, 100):
            cov = self._cov_m2 / (self._cov_n - 1) + 1e-8 * np.eye(d)
            try:
                self.block_chol = np.linalg.cholesky(cov * (2.38**2 / d))
            except np.linalg.LinAlgError:
                pass

    def _track_scalars(self, theta):
        self._cov_n += 1
        delta = theta - self._cov_mean
        self._cov_mean += delta / self._cov_n
        self._cov_m2 += np.outer(delta, theta - self._cov_mean)

    # -- scalar blocks

    def _theta(self):
        s = self.state
        return np.array([np.log(s.psi) if n == "psi" else getattr(s, n) for n in self.free_scalars])

    def _scalar_target(self, theta, part, const_cache):
        """Log target of the free fixed-effect scalars (log psi with Jacobian)."""
        s = self.state
        values = dict(zip(self.free_scalars, theta))
        icpt = s.intercept_vector().copy()
        for k, name in enumerate(INTERCEPTS):
            if name in values:
                icpt[k] = values[name]
        beta = values.get("beta", s.beta)
        log_psi = values.get("psi", np.log(s.psi))
        psi = float(np.exp(log_psi))
        if not np.isfinite(psi) or psi <= 0:
            return -np.inf
        args = part + icpt[:, None]
        ll = K.loglik_mu(args, self._omega_eff(), self.x * beta + s.u, s.delta, self.yobs, self.yprev, self.lag,
                         psi, self.variant.signed, self.variant.has_log)
        if ll == -np.inf:
            return -np.inf
        if psi not in const_cache:
            const_cache[psi] = K.nb_constant(self.yobs, psi)
        ll += const_cache[psi]
        var = self.prior.normal_var_fixed
        lp = -0.5 * sum(icpt[k] ** 2 for k, n in enumerate(INTERCEPTS) if n in self.variant.intercepts) / var
        lp += -0.5 * beta**2 / var
        lp += self.prior.gamma_shape * log_psi - self.prior.gamma_rate * psi
        return ll + lp

    def _apply_theta(self, theta):
        for name, value in zip(self.free_scalars, theta):
            if name == "psi":
                self.state.psi = float(np.exp(value))
            else:
                setattr(self.state, name, float(value))

    def update_scalars(self, adapting):
        if not self.free_scalars:
            return
        part = self._field_part()
        const_cache: dict = {}
        theta = self._theta()
        lp = self._scalar_target(theta, part, const_cache)
        for j, name in enumerate(self.free_scalars):
            k = self.scalars.index(name)
            prop = theta.copy()
            prop[j] += self.scale["scalar"][k] * self.rng.standard_normal()
            lp_new = self._scalar_target(prop, part, const_cache)
            ok = np.log(self.rng.uniform()) < lp_new - lp
            if ok:
                theta, lp = prop, lp_new
            self._record("scalar", float(ok), idx=k)
        if len(self.free_scalars) >= 2:
            prop = theta + float(self.scale["block"]) * (self.block_chol @ self.rng.standard_normal(len(theta)))
            lp_new = self._scalar_target(prop, part, const_cache)
            ok = np.log(self.rng.uniform()) < lp_new - lp
            if ok:
                theta, lp = prop, lp_new
            self._record("block", float(ok))
        self._apply_theta(theta)
        if adapting:
            self._track_scalars(theta)

    def update_ridge(self):
        """Exchange ``beta`` against per-area delta levels (likelihood unchanged)."""
        s = self.state
        d = float(self.scale["ridge"]) * self.rng.standard_normal()
        var, iv = self.prior.normal_var_fixed, self.prior.delta_init_var
        new_d0 = s.delta[:, 0] - self.x * d
        dlp = -0.5 * ((s.beta + d) ** 2 - s.beta**2) / var
        dlp -= 0.5 * np.sum(new_d0**2 - s.delta[:, 0] ** 2) / iv
        ok = np.log(self.rng.uniform()) < dlp
        if ok:
            s.beta += d
            s.delta -= (self.x * d)[:, None]
        self._record("ridge", float(ok))

    # -- CAR fields

    def update_field(self, name):
        s = self.state
        z = self.rng.standard_normal(self.n)
        logu = np.log(self.rng.uniform(size=self.n))
        accepted = np.zeros(self.n, dtype=np.bool_)
        args = self._args()
        icpt = s.intercept_vector()
        vec = s.field(name)
        K.update_car_field(
            vec, self.masks[name], args, icpt, self._omega_eff(), self._lin(), s.delta,
            self.yobs, self.yprev, self.lag, s.psi, self.variant.signed,
            self.indptr, self.indices, self.comp, self.comp_size, self.members_ptr, self.members,
            self.use_comp, s.tau[name], self.prior.normal_var_fixed, self.scale[name], z, logu, accepted,
        )
        for k, iname in enumerate(INTERCEPTS):
            if self.masks[name][k]:
                setattr(s, iname, float(icpt[k]))
        self._recenter(vec)
        active = self.comp_size[self.comp] > 1
        self._record(name, accepted.astype(float), active.astype(float))

    def _recenter(self, vec):
        means = np.bincount(self.comp, weights=vec) / self.comp_size
        vec -= means[self.comp]

    def update_u(self):
        s = self.state
        z = self.rng.standard_normal(self.n)
        logu = np.log(self.rng.uniform(size=self.n))
        accepted = np.zeros(self.n, dtype=np.bool_)
        lin = self._lin()
        K.update_u_field(
            s.u, lin, s.delta, self._link_cache(), self._omega_eff(), self.yobs, self.yprev, self.lag, s.psi,
            self.indptr, self.indices, self.comp, self.comp_size, self.members_ptr, self.members,
            s.tau["u"], self.prior.delta_init_var, self.scale["u"], z, logu, accepted,
        )
        self._recenter(s.u)
        active = self.comp_size[self.comp] > 1
        self._record("u", accepted.astype(float), active.astype(float))

    # -- delta

    def update_delta(self):
        s = self.state
        cache = self._link_cache()
        lin = self._lin()
        omega = self._omega_eff()
        z = self.rng.standard_normal((self.n, self.t))
        logu = np.log(self.rng.uniform(size=(self.n, self.t)))
        accepted = np.zeros((self.n, self.t), dtype=np.bool_)
        K.update_delta_sites(s.delta, lin, cache, omega, self.yobs, self.yprev, self.lag, s.psi, s.sigma2_delta,
                             self.prior.delta_init_var, self.scale["delta"], z, logu, accepted)
        self._record("delta", accepted.astype(float), 1.0)
        z = self.rng.standard_normal(self.n)
        logu = np.log(self.rng.uniform(size=self.n))
        acc_rows = np.zeros(self.n, dtype=np.bool_)
        K.update_delta_rows(s.delta, lin, cache, omega, self.yobs, self.yprev, self.lag, s.psi,
                            self.prior.delta_init_var, self.scale["delta_row"], z, logu, acc_rows)
        self._record("delta_row", acc_rows.astype(float), 1.0)
        starts = self.rng.integers(1, self.t, size=self.n)
        z = self.rng.standard_normal(self.n)
        logu = np.log(self.rng.uniform(size=self.n))
        acc_tails = np.zeros(self.n, dtype=np.bool_)
        K.update_delta_tails(s.delta, lin, cache, omega, self.yobs, self.yprev, self.lag, s.psi, s.sigma2_delta,
                             starts, self.scale["delta_tail"], z, logu, acc_tails)
        self._record("delta_tail", acc_tails.astype(float), 1.0)

    # -- mixture weights

    def update_omega(self):
        s = self.state
        t1 = self.t - 1
        z = self.rng.standard_normal(t1)
        logu = np.log(self.rng.uniform(size=t1))
        accepted = np.zeros(t1, dtype=np.bool_)
        K.update_omega(s.omega, s.q1, s.q2, self._link_cache(), self._lin(), s.delta, self.yobs, self.yprev,
                       self.lag, s.psi, self.scale["omega"], z, logu, accepted)
        self._record("omega", accepted.astype(float), 1.0)

    def _q_target(self, q1, q2):
        s = self.state
        a, b = self.prior.gamma_shape, self.prior.gamma_rate
        lw, l1w = np.log(s.omega), np.log1p(-s.omega)
        beta = gammaln(q1 + q2) - gammaln(q1) - gammaln(q2) + (q1 - 1) * lw + (q2 - 1) * l1w
        return beta + a * np.log(q1) - b * q1 + a * np.log(q2) - b * q2

    def update_q(self):
        s = self.state
        t1 = self.t - 1
        for key in ("q1", "q2", "qjoint"):
            lp = self._q_target(s.q1, s.q2)
            step = np.exp(self.scale[key] * self.rng.standard_normal(t1))
            q1 = s.q1 * step if key in ("q1", "qjoint") else s.q1
            q2 = s.q2 * step if key in ("q2", "qjoint") else s.q2
            lp_new = self._q_target(q1, q2)
            ok = np.log(self.rng.uniform(size=t1)) < lp_new - lp
            ok &= np.isfinite(lp_new)
            s.q1 = np.where(ok, q1, s.q1)
            s.q2 = np.where(ok, q2, s.q2)
            self._record(key, ok.astype(float), 1.0)

    # -- precisions (conjugate Gamma draws)

    def precision_conditionals(self) -> dict[str, tuple[float, float]]:
        """Gamma ``(shape, rate)`` full conditionals of the free precisions.

        ``"sigma2_delta"`` refers to the precision ``1 / sigma2_delta``.
        """
        s = self.state
        a, b = self.prior.gamma_shape, self.prior.gamma_rate
        src, dst = self.indices, np.repeat(np.arange(self.n), np.diff(self.indptr))
        out = {}
        for name in self.variant.precisions:
            if f"tau_{name}" not in self.free:
                continue
            vec = s.field(name)
            quad = 0.5 * np.sum((vec[dst] - vec[src]) ** 2)  # each edge appears twice
            out[name] = (a + 0.5 * self.rank, b + 0.5 * quad)
        if "sigma2_delta" in self.free and self.t > 1:
            ss = np.sum(np.diff(s.delta, axis=1) ** 2)
            out["sigma2_delta"] = (a + 0.5 * self.n * (self.t - 1), b + 0.5 * ss)
        return out

    def update_precisions(self):
        s = self.state
        for name, (shape, rate) in self.precision_conditionals().items():
            value = float(self.rng.gamma(shape, 1.0 / rate))
            if name == "sigma2_delta":
                s.sigma2_delta = 1.0 / value
            else:
                s.tau[name] = value

    def update_sigma_scale(self):
        """Rescale ``sigma2_delta`` and every delta increment together.

        ``sigma2 -> c**2 sigma2`` and ``delta_it -> delta_i1 + c (delta_it -
        delta_i1)``.  The increment prior and the Jacobian cancel, leaving the
        likelihood and the Gamma prior on the precision.
        """
        s = self.state
        log_c = float(self.scale["sigma_scale"]) * self.rng.standard_normal()
        c = np.exp(log_c)
        start = s.delta[:, :1]
        delta_new = start + c * (s.delta - start)
        cache, lin, omega = self._link_cache(), self._lin(), self._omega_eff()
        args = (cache, omega, lin)
        old = K.row_loglik(*args, s.delta, self.yobs, self.yprev, self.lag, s.psi).sum()
        new = K.row_loglik(*args, delta_new, self.yobs, self.yprev, self.lag, s.psi).sum()
        prec, prec_new = 1.0 / s.sigma2_delta, np.exp(-2.0 * log_c) / s.sigma2_delta
        a, b = self.prior.gamma_shape, self.prior.gamma_rate
        dlp = a * (np.log(prec_new) - np.log(prec)) - b * (prec_new - prec)
        ok = bool(np.isfinite(new) and np.log(self.rng.uniform()) < new - old + dlp)
        if ok:
            s.delta = delta_new
            s.sigma2_delta = float(1.0 / prec_new)
        self._record("sigma_scale", float(ok))

    # -- sweep

    def sweep(self, adapting):
        free = self.free
        self.update_scalars(adapting)
        if "beta" in free and "delta" in free:
            self.update_ridge()
        for name in self.fields:
            if name in free:
                self.update_field(name)
        if "u" in free:
            self.update_u()
        if "delta" in free:
            self.update_delta()
        if "omega" in free:
            self.update_omega()
        if "q" in free:
            self.update_q()
        self.update_precisions()
        if "sigma2_delta" in free and "delta" in free:
            self.update_sigma_scale()

    def pointwise(self):
        s = self.state
        return K.pointwise_loglik(self._args(), self._omega_eff(), self._lin(), s.delta, self.yobs, self.yprev,
                                  self.lag, self.lgy1, s.psi, self.variant.signed)

    def acceptance_summary(self, totals) -> dict[str, float]:
        out = {}
        for key, (acc, att) in totals.items():
            if key == "scalar":
                for k, name in enumerate(self.scalars):
                    if att[k] > 0:
                        out[name] = float(acc[k] / att[k])
            elif np.sum(att) > 0:
                out[key] = float(np.sum(acc) / np.sum(att))
        return out


def _check_state(state: LatentState, variant: ModelVariant):
    ok = np.isfinite(state.psi) and state.psi > 0 and state.sigma2_delta > 0
    ok &= all(v > 0 for v in state.tau.values())
    if variant.is_mixture:
        ok &= bool(np.all((state.omega > 0) & (state.omega < 1)))
        ok &= bool(np.all(state.q1 > 0) and np.all(state.q2 > 0))
    return ok


def _run_chain(payload):
    data, variant, weights, prior, config, chain, init, free = payload
    sampler = _Chain(data, variant, weights, prior, config, chain, init, free)
    layout = parameter_layout(variant, sampler.n, sampler.t)
    n_keep = config.n_retained
    n_par = sum(int(np.prod(s)) if s else 1 for _, s in layout)
    draws = np.empty((n_keep, n_par))
    pointwise = np.empty((n_keep, sampler.n, sampler.t - 1)) if config.store_pointwise else None
    keep = 0
    post_totals = None
    for it in range(config.n_iterations):
        adapting = it < config.n_burnin
        if it == config.n_burnin:
            post_totals = {k: [np.zeros_like(v[0]), np.zeros_like(v[1])] for k, v in sampler.totals.items()}
            snapshot = {k: [v[0].copy(), v[1].copy()] for k, v in sampler.totals.items()}
        sampler.sweep(adapting)
        if adapting and (it + 1) % config.adapt_window == 0:
            sampler.adapt()
        if not adapting and (it - config.n_burnin) % config.thin == 0:
            if not _check_state(sampler.state, variant):
                raise SamplerError(f"chain {chain}: invalid state at iteration {it}")
            pw = sampler.pointwise()
            if not np.all(np.isfinite(pw)):
                raise SamplerError(f"chain {chain}: non-finite log-likelihood at iteration {it}")
            draws[keep] = flatten_state(sampler.state, layout)
            if pointwise is not None:
                pointwise[keep] = pw
            keep += 1
    if post_totals is None:
        snapshot = {k: [np.zeros_like(v[0]), np.zeros_like(v[1])] for k, v in sampler.totals.items()}
    post = {k: [v[0] - snapshot[k][0], v[1] - snapshot[k][1]] for k, v in sampler.totals.items()}
    return draws, pointwise, sampler.acceptance_summary(post), layout


def _n_workers(config: SamplerConfig) -> int:
    cap = os.environ.get("EPIMIX_THREADS")
    limit = config.workers or os.cpu_count() or 1
    if cap:
        limit = min(limit, max(1, int(cap)))
    return max(1, min(limit, config.n_chains))


def run(
    data: PanelData,
    variant: ModelVariant,
    weights: SpatialWeights,
    prior_config: PriorConfig = PriorConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
    init: LatentState | None = None,
    free=None,
) -> PosteriorSamples:
    """Run ``n_chains`` independent chains and collect the retained draws.

    Chain ``c`` is seeded with ``seed + c``; results do not depend on how
    many worker processes run the chains.  ``init`` replaces the default
    starting point and ``free`` restricts updates to the named blocks
    (everything else stays at its initial value).
    """
    if data.n_areas < 2:
        raise SamplerError("need at least two areas")
    if data.n_periods < 2:
        raise SamplerError("need at least two periods")
    payloads = [(data, variant, weights, prior_config, sampler_config, c, init, free) for c in range(sampler_config.n_chains)]
    workers = _n_workers(sampler_config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chain, payloads))
    else:
        results = [_run_chain(p) for p in payloads]
    layout = results[0][3]
    draws = np.stack([r[0] for r in results])
    pointwise = np.stack([r[1] for r in results]) if sampler_config.store_pointwise else None
    keys = sorted(set().union(*(r[2] for r in results)))
    acceptance = {k: np.array([r[2].get(k, np.nan) for r in results]) for k in keys}
    return PosteriorSamples(
        variant=variant,
        layout=layout,
        names=element_names(layout),
        draws=draws,
        pointwise=pointwise,
        acceptance=acceptance,
        config=sampler_config,
    )


__all__ = [
    "SamplerConfig",
    "SamplerError",
    "PosteriorSamples",
    "parameter_layout",
    "element_names",
    "flatten_state",
    "unflatten_state",
    "adapt_scales",
    "update_block",
    "run",
]
