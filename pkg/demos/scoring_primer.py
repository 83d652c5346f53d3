"""The three scores used for model comparison, on toy inputs.

    python demos/scoring_primer.py
"""

import numpy as np

from epimix.scoring import coverage, dss, rps, waic

rng = np.random.default_rng(0)

# RPS rewards predictive distributions that put mass near the observed count
sharp = rng.poisson(20, 5000)
vague = rng.negative_binomial(2, 2 / 22, 5000)
for y in (20, 45):
    print(f"y={y}: RPS sharp {rps(sharp, y):6.2f}  vague {rps(vague, y):6.2f}")

# DSS only sees the predictive mean and variance
print("DSS, right mean, small var:", round(dss(20.0, 20.0, 21), 3))
print("DSS, right mean, large var:", round(dss(20.0, 220.0, 21), 3))

# WAIC from a draws x observations log-likelihood matrix: lower is better
ll_good = rng.normal(-2.0, 0.1, (400, 50))
ll_poor = rng.normal(-2.5, 0.4, (400, 50))
print("WAIC good / poor:", [round(waic(ll)[0], 1) for ll in (ll_good, ll_poor)])

# interval coverage of a held-out total
print("covered:", coverage(154018, 175048, 155181))
