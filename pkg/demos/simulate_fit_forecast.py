"""Simulate a panel with two outbreak bursts, fit a plain and a mixture model,
and compare them on WAIC and on a one-step forecast of the held-out week.

Runs in about a minute; raise ITERATIONS for publication-grade chains.

    python demos/simulate_fit_forecast.py
"""

import numpy as np

from epimix.diagnostics import psrf_all
from epimix.forecast import growth_ratios, one_step_ahead
from epimix.model import ModelVariant
from epimix.posterior import coefficient_draws
from epimix.sampler import SamplerConfig, run
from epimix.scoring import rps, score_fit
from epimix.simulate import Scenario, simulate_panel
from epimix.spatial_graph import row_standardize

ITERATIONS = 3000

# %% data: 20 areas on a torus, 40 weeks, bursts in weeks 12-16 and 28-33
scenario = Scenario()
data, truth, graph = simulate_panel(scenario)
weights = row_standardize(graph)
print("weekly growth of the regional total:")
print(np.round(growth_ratios(data), 2))

# %% fit a log-link-only model and the four-field mixture
fits = {}
for kind in ("m1", "m4"):
    variant = ModelVariant(kind)
    config = SamplerConfig(n_chains=2, n_iterations=ITERATIONS, n_burnin=ITERATIONS // 2, seed=3)
    samples = run(data, variant, weights, sampler_config=config)
    report = score_fit(samples, data, weights, np.random.default_rng(0))
    print(f"{kind}: WAIC {report.waic:9.1f}  p_waic {report.p_waic:6.1f}  max PSRF {psrf_all(samples.draws).max():.3f}")
    fits[kind] = (variant, samples)

# %% the mixture weight should track the scripted schedule
_, mix = fits["m4"]
omega_hat = mix.pooled("omega").mean(axis=0)
print("omega correlation with truth:", round(float(np.corrcoef(omega_hat, truth.omega)[0, 1]), 3))

# %% how many areas look locally explosive each week (posterior mean count of rho > 1)
rho, _ = coefficient_draws(mix, data.n_periods)
r_x = (rho > 1).sum(axis=1).mean(axis=0)
for period, value in zip(data.periods[1:], r_x):
    if value >= 1:
        print(f"  week {period}: {value:4.1f} areas with rho > 1")

# %% forecast the held-out week
actual = int(data.holdout.sum())
for kind, (variant, samples) in fits.items():
    draws = one_step_ahead(samples, data, variant, weights, np.random.default_rng(1))
    lo, hi = draws.interval()
    print(f"{kind}: 95% interval ({lo:.0f}, {hi:.0f}) for actual {actual}; RPS {rps(draws.totals, actual):.1f}")
