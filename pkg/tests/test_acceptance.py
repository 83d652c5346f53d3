"""Acceptance criteria 1-8.

Each check records its verdict in ``RESULTS`` before asserting, and the
terminal summary prints one pass/fail line per criterion.  Criteria 3-6 run
real MCMC and take roughly half an hour in total on one core.
"""

import csv
import filecmp
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import random_state
from epimix import cli
from epimix.forecast import one_step_ahead
from epimix.model import ModelVariant, PanelData, initial_state, link_coefficients, nb_log_pmf
from epimix.priors import icar_log_density, omega_log_density, rw1_log_density, total_log_posterior
from epimix.sampler import SamplerConfig, run
from epimix.scoring import dss, rps, waic
from epimix.simulate import Scenario, simulate_panel
from epimix.spatial_graph import build_graph, connected_components, row_standardize

RESULTS: dict[int, list] = {}


def record(criterion: int, name: str, ok: bool, detail: str) -> None:
    RESULTS.setdefault(criterion, []).append((name, bool(ok), detail))
    print(f"criterion {criterion} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion} [{name}] failed: {detail}"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- 1. oracles

N_CASES = 25


def nb_oracle(y, mu, psi):
    terms = [math.log((psi + k) / (k + 1.0)) for k in range(y)]
    terms += [psi * math.log(psi / (mu + psi)), y * math.log(mu / (mu + psi))]
    return math.fsum(terms)


def icar_oracle(f, n, edges, tau):
    adj = np.zeros((n, n))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    lap = np.diag(adj.sum(axis=1)) - adj
    quad = math.fsum(float(f[i]) * float(lap[i, j]) * float(f[j]) for i in range(n) for j in range(n))
    return -0.5 * tau * quad + 0.5 * np.linalg.matrix_rank(lap) * math.log(tau)


def rw1_oracle(delta, sigma2, init_var):
    def normal(x, var):
        return -0.5 * math.log(2 * math.pi * var) - 0.5 * x * x / var

    terms = []
    for row in delta:
        terms.append(normal(float(row[0]), init_var))
        terms.extend(normal(float(row[t] - row[t - 1]), sigma2) for t in range(1, len(row)))
    return math.fsum(terms)


def beta_oracle(w, a, b):
    return math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + (a - 1) * math.log(w) + (b - 1) * math.log1p(-w)


def rps_exact(draws, y):
    n = len(draws)
    top = max(max(draws), y)
    return float(sum((Fraction(sum(d <= k for d in draws), n) - (1 if y <= k else 0)) ** 2 for k in range(top + 1)))


def dss_exact(mu, var, y):
    return float((Fraction(y) - Fraction(mu)) ** 2 / Fraction(var)) + math.log(var)


def waic_oracle(ll):
    s, n_obs = ll.shape
    lppd, p = [], []
    for j in range(n_obs):
        col = [float(v) for v in ll[:, j]]
        top = max(col)
        lppd.append(top + math.log(math.fsum(math.exp(v - top) for v in col) / s))
        mean = math.fsum(col) / s
        p.append(math.fsum((v - mean) ** 2 for v in col) / (s - 1))
    lppd_sum, p_sum = math.fsum(lppd), math.fsum(p)
    return -2.0 * (lppd_sum - p_sum), p_sum


def test_criterion1_oracle_equivalence():
    rng = np.random.default_rng(101)
    worst = {}

    def track(name, got, want):
        worst[name] = max(worst.get(name, 0.0), abs(got - want))

    for _ in range(N_CASES):
        y, mu, psi = int(rng.integers(0, 300)), float(rng.uniform(0.05, 500)), float(rng.uniform(0.1, 200))
        track("nb_log_pmf", nb_log_pmf(y, mu, psi), nb_oracle(y, mu, psi))

        n = int(rng.integers(3, 9))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.uniform() < 0.4]
        graph = build_graph(pairs, n)
        labels = connected_components(graph)
        f = rng.normal(size=n)
        f -= (np.bincount(labels, weights=f) / np.bincount(labels))[labels]
        tau = float(rng.uniform(0.1, 50))
        track("icar", icar_log_density(f, graph, tau), icar_oracle(f, n, graph.edges(), tau))

        delta = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(2, 8))))
        s2, iv = float(rng.uniform(0.01, 2)), float(rng.uniform(0.5, 3))
        track("rw1", rw1_log_density(delta, s2, iv), rw1_oracle(delta, s2, iv))

        w, a, b = float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 30)), float(rng.uniform(0.1, 30))
        track("omega", omega_log_density(w, a, b), beta_oracle(w, a, b))

        draws = rng.integers(0, 25, int(rng.integers(1, 40))).tolist()
        target = int(rng.integers(0, 30))
        track("rps", rps(draws, target), rps_exact(draws, target))

        m, v, obs = float(rng.normal(10, 5)), float(rng.uniform(0.1, 50)), float(rng.integers(0, 30))
        track("dss", dss(m, v, obs), dss_exact(m, v, obs))

        ll = rng.normal(-4, 2, (int(rng.integers(2, 30)), int(rng.integers(1, 10))))
        got, want = waic(ll), waic_oracle(ll)
        track("waic", max(abs(got[0] - want[0]), abs(got[1] - want[1])), 0.0)

    tolerance = {"nb_log_pmf": 1e-6, "omega": 1e-6}
    ok = all(err < tolerance.get(name, 1e-9) for name, err in worst.items())
    detail = ", ".join(f"{k} max|d|={v:.1e}" for k, v in worst.items())
    record(1, f"{N_CASES} random cases each", ok, detail)


# ---------------------------------------------------------------- 2. mixture collapse


@pytest.mark.parametrize("signed", [False, True])
def test_criterion2_mixture_collapse(signed):
    rng = np.random.default_rng(202)
    rng_kind = "signed" if signed else "unit"
    worst = 0.0
    for kind in ("m3", "m4"):
        variant = ModelVariant(kind, rng_kind)
        for _ in range(20):
            state = random_state(variant, 6, 7, rng, scale=1.0)
            stationary = (0, 1) if kind == "m3" else (2, 3)
            m1 = initial_state(ModelVariant("m1"), 6, 7)
            m1.alpha1, m1.alpha2 = state.alpha1, state.alpha2
            m1.f[0], m1.f[1] = state.g[0], state.g[1]
            m2 = initial_state(ModelVariant("m2", rng_kind), 6, 7)
            m2.kappa1, m2.kappa2 = state.kappa1, state.kappa2
            m2.f[2], m2.f[3] = state.g[stationary[0]], state.g[stationary[1]]
            for weight, other, other_variant in ((1.0, m1, ModelVariant("m1")), (0.0, m2, ModelVariant("m2", rng_kind))):
                state.omega = np.full(6, weight)
                mix = link_coefficients(variant, state)
                ref = link_coefficients(other_variant, other)
                worst = max(worst, np.abs(mix.rho - ref.rho).max(), np.abs(mix.lam - ref.lam).max())
    record(2, f"{rng_kind} range", worst < 1e-12, f"max|d|={worst:.1e}")


# ---------------------------------------------------------------- 3. sampler vs grid posterior

N_BINS = 40


def _grid_marginal(name, init, variant, weights, data, graph):
    """Normalised grid posterior of one scalar on its sampling scale (log for psi)."""

    def log_density(g):
        state = init.copy()
        if name == "psi":
            state.psi = float(np.exp(g))
            return total_log_posterior(state, variant, weights, data, graph) + g
        setattr(state, name, float(g))
        return total_log_posterior(state, variant, weights, data, graph)

    coarse = np.linspace(-12, 12, 2401)
    lp = np.array([log_density(g) for g in coarse])
    keep = coarse[lp > lp.max() - 40]
    grid = np.linspace(keep[0] - 0.05, keep[-1] + 0.05, 20001)
    lp = np.array([log_density(g) for g in grid])
    p = np.exp(lp - lp.max())
    return grid, p / p.sum()


@pytest.mark.parametrize("name", ["alpha1", "psi"])
def test_criterion3_sampler_matches_grid(name):
    graph = build_graph([(0, 1)], 2)
    weights = row_standardize(graph)
    data = PanelData(y=np.array([[4, 9, 15], [6, 7, 12]]), x=np.array([-0.5, 0.5]))
    variant = ModelVariant("m1")
    init = initial_state(variant, 2, 3)
    init.alpha2, init.beta, init.psi = math.log(0.3), 0.2, 8.0
    init.delta[:] = 0.5
    init.sigma2_delta = 0.1
    cfg = SamplerConfig(n_chains=2, n_iterations=26_000, n_burnin=1_000, seed=11, jitter=0.0, store_pointwise=False)
    samples = run(data, variant, weights, sampler_config=cfg, init=init, free={name})
    x = samples.pooled(name)
    if name == "psi":
        x = np.log(x)
    grid, p = _grid_marginal(name, init, variant, weights, data, graph)
    # bins of equal grid-posterior mass
    edges = np.interp(np.linspace(0, 1, N_BINS + 1)[1:-1], np.cumsum(p), grid)
    freq = np.bincount(np.searchsorted(edges, x), minlength=N_BINS) / x.size
    tv = 0.5 * np.abs(freq - 1.0 / N_BINS).sum()
    record(3, f"{name} ({x.size} draws)", tv < 0.05, f"TV={tv:.4f}")


# ---------------------------------------------------------------- 4 and 7. recovery run


def _simulate_cli(base: Path, tag: str, truth: dict) -> Path:
    cfg = base / f"{tag}.ini"
    cfg.write_text("[truth]\n" + "".join(f"{k} = {v}\n" for k, v in truth.items()))
    out = base / tag
    assert cli.main(["simulate", "--config", str(cfg), "-o", str(out)]) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def recovery(tmp_path_factory):
    base = tmp_path_factory.mktemp("recovery")
    sim = _simulate_cli(base, "sim", {})
    code = cli.main(["fit", "--config", str(sim / "fit.ini"), "-o", str(base / "m4")])
    return sim, base / "m4", code


def test_criterion4_parameter_recovery(recovery):
    sim, run_dir, code = recovery
    truth = {r["parameter"]: float(r["value"]) for r in read_rows(sim / "truth.csv")}
    post = {r["parameter"]: r for r in read_rows(run_dir / "posterior_summary.csv")}
    cfg = cli.io.read_manifest(run_dir)["config"]["sampler"]
    assert (cfg["chains"], cfg["iterations"], cfg["burnin"]) == ("2", "20000", "10000")
    for name in ("alpha1", "kappa1", "beta", "psi"):
        mean, sd = float(post[name]["mean"]), float(post[name]["sd"])
        z = abs(mean - truth[name]) / sd
        record(4, name, z < 3, f"truth {truth[name]:.3f}, posterior {mean:.3f} +/- {sd:.3f}, |z|={z:.2f}")
    omega_post = np.array([float(r["mean"]) for r in read_rows(run_dir / "omega.csv")])
    omega_true = np.array([truth[f"omega[{k}]"] for k in range(1, omega_post.size + 1)])
    r = np.corrcoef(omega_post, omega_true)[0, 1]
    record(4, "omega correlation", r > 0.8, f"r={r:.3f}")
    max_psrf = max(float(row["psrf"]) for row in post.values())
    record(4, "PSRF", max_psrf < 1.1 and code == cli.EXIT_OK, f"max={max_psrf:.3f}, exit code {code}")
    acceptance = [float(r["value"]) for r in read_rows(run_dir / "diagnostics.csv") if r["metric"] == "acceptance"]
    lo, hi = min(acceptance), max(acceptance)
    record(4, "acceptance rates", 0.1 <= lo and hi <= 0.7, f"range [{lo:.2f}, {hi:.2f}]")


def test_criterion7_exceedance_mechanics(recovery):
    _, run_dir, _ = recovery
    rows = read_rows(run_dir / "Rx_Lx.csv")
    periods = np.array([int(r["period"]) for r in rows])
    r_x = np.array([float(r["Rx_mean"]) for r in rows])
    windows = Scenario().epidemic_windows
    inside = np.zeros(periods.size, dtype=bool)
    for first, last in windows:
        inside |= (periods >= first) & (periods <= last)
    peak = int(periods[np.argmax(r_x)])
    n_areas = 20
    outside_max = r_x[~inside].max()
    record(7, "peak inside window", bool(inside[np.argmax(r_x)]), f"peak {r_x.max():.1f} at period {peak}")
    record(7, "quiet outside", outside_max < 0.1 * n_areas, f"max outside {outside_max:.2f} of {n_areas} areas")


# ---------------------------------------------------------------- 5. model comparison

COMPARE_SEEDS = (1, 2, 3, 4, 5)
COMPARE_ITER = ["--sampler.iterations=6000", "--sampler.burnin=3000"]


def test_criterion5_waic_prefers_mixtures(tmp_path):
    wins, lines = 0, []
    for seed in COMPARE_SEEDS:
        sim = _simulate_cli(tmp_path, f"sim{seed}", {"seed": seed})
        runs = []
        for variant in ("m1", "m2", "m3", "m4"):
            out = tmp_path / f"s{seed}_{variant}"
            code = cli.main(["fit", "--config", str(sim / "fit.ini"), "-o", str(out), f"--model.variant={variant}",
                             *COMPARE_ITER])
            assert code in (cli.EXIT_OK, cli.EXIT_CONVERGENCE)
            runs.append(str(out))
        table = tmp_path / f"cmp{seed}"
        assert cli.main(["compare", *runs, "-o", str(table)]) == cli.EXIT_OK
        rows = read_rows(table / "compare.csv")
        waics = {r["variant"]: float(r["waic"]) for r in rows}
        won = rows[0]["variant"] in ("m3", "m4")
        wins += won
        margin = min(waics["m1"], waics["m2"]) - min(waics["m3"], waics["m4"])
        lines.append(f"seed {seed}: best {rows[0]['variant']}, margin {margin:.1f}")
    record(5, "WAIC ranking", wins >= 4, f"{wins}/5 replicates; " + ", ".join(lines))


# ---------------------------------------------------------------- 6. forecast calibration

CALIBRATION = SamplerConfig(n_chains=2, n_iterations=2000, n_burnin=1000, store_pointwise=False)


def _covered(scenario: Scenario, kind: str) -> bool:
    data, _, graph = simulate_panel(scenario)
    variant = ModelVariant(kind)
    weights = row_standardize(graph)
    cfg = SamplerConfig(**{**CALIBRATION.__dict__, "seed": scenario.seed})
    samples = run(data, variant, weights, sampler_config=cfg)
    draws = one_step_ahead(samples, data, variant, weights, np.random.default_rng([scenario.seed, 2]))
    lo, hi = draws.interval(0.95)
    return lo <= data.holdout.sum() <= hi


def test_criterion6_endemic_calibration():
    hits = sum(_covered(Scenario(epidemic_windows=[], seed=1000 + k), "m4") for k in range(50))
    record(6, "endemic coverage", hits >= 0.85 * 50, f"{hits}/50 = {hits / 50:.0%}")


def test_criterion6_explosive_m4_beats_m1():
    scenarios = [Scenario(epidemic_windows=[(40, 41)], seed=2000 + k) for k in range(20)]
    m4 = sum(_covered(sc, "m4") for sc in scenarios)
    m1 = sum(_covered(sc, "m1") for sc in scenarios)
    record(6, "explosive coverage", m4 > m1, f"M4 {m4}/20 vs M1 {m1}/20")


# ---------------------------------------------------------------- 8. determinism


def test_criterion8_manifest_rerun(tmp_path):
    sim = _simulate_cli(tmp_path, "sim", {"n_rows": 3, "n_cols": 3, "n_periods": 12})
    quick = ["--sampler.iterations=300", "--sampler.burnin=100"]
    outputs = {"simulate": sim}
    for variant in ("m2", "m4"):
        out = tmp_path / variant
        assert cli.main(["fit", "--config", str(sim / "fit.ini"), "-o", str(out), f"--model.variant={variant}",
                         "--output.trace=true", *quick]) in (cli.EXIT_OK, cli.EXIT_CONVERGENCE)
        outputs[f"fit {variant}"] = out
    assert cli.main(["forecast", str(tmp_path / "m4"), "--omega-mode=beta"]) == cli.EXIT_OK
    outputs["forecast"] = tmp_path / "m4" / "forecast"
    assert cli.main(["score", str(tmp_path / "m4")]) == cli.EXIT_OK
    outputs["score"] = tmp_path / "m4" / "score"
    assert cli.main(["diag", str(tmp_path / "m2"), "--trace"]) in (cli.EXIT_OK, cli.EXIT_CONVERGENCE)
    outputs["diag"] = tmp_path / "m2" / "diag"
    assert cli.main(["compare", str(tmp_path / "m2"), str(tmp_path / "m4"), "-o", str(tmp_path / "cmp")]) == 0
    outputs["compare"] = tmp_path / "cmp"

    for label, source in outputs.items():
        again = tmp_path / "rerun" / label.replace(" ", "_")
        code = cli.main(["rerun", str(source / "manifest.json"), "-o", str(again)])
        files = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
        same = code in (cli.EXIT_OK, cli.EXIT_CONVERGENCE) and bool(files) and all(
            filecmp.cmp(source / rel, again / rel, shallow=False) for rel in files
        )
        record(8, label, same, f"{len(files)} files byte-identical" if same else "mismatch")
