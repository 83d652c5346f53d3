import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from epimix import cli
from epimix.diagnostics import psrf_all, summarize_columns
from epimix.sampler import SamplerError

SCENARIO = "[truth]\nn_rows = 3\nn_cols = 3\nn_periods = 12\nepidemic_windows = 6-8\nseed = {seed}\n"
QUICK = ["--sampler.iterations=240", "--sampler.burnin=80", "--output.psrf_threshold=100"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def simulate(base: Path, seed=5) -> Path:
    cfg = base / f"scenario{seed}.ini"
    cfg.write_text(SCENARIO.format(seed=seed))
    out = base / f"sim{seed}"
    assert cli.main(["simulate", "--config", str(cfg), "-o", str(out)]) == 0
    return out


def fit(sim: Path, out: Path, variant: str, extra=()) -> int:
    return cli.main(["fit", "--config", str(sim / "fit.ini"), "-o", str(out), f"--model.variant={variant}", *QUICK, *extra])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    sim = simulate(base)
    out = {"sim": sim, "base": base}
    for variant in ("m1", "m3"):
        assert fit(sim, base / variant, variant, ["--output.trace=true"]) == 0
        out[variant] = base / variant
    assert cli.main(["forecast", str(base / "m3")]) == 0
    assert cli.main(["score", str(base / "m3"), "-o", str(base / "rescore")]) == 0
    assert cli.main(["compare", str(base / "m1"), str(base / "m3"), "-o", str(base / "cmp")]) == 0
    assert cli.main(["diag", str(base / "m1"), "--trace"]) == 0
    return out


def test_simulate_outputs(runs):
    sim = runs["sim"]
    for name in ("counts.csv", "covariates.csv", "adjacency.txt", "truth.csv", "fit.ini", "manifest.json"):
        assert (sim / name).is_file()
    rows = read_rows(sim / "counts.csv")
    assert len(rows) == 9 * 13  # observed periods plus the holdout
    assert json.loads((sim / "manifest.json").read_text())["command"] == "simulate"


def test_fit_outputs(runs):
    run = runs["m3"]
    for name in ("posterior_summary.csv", "rho_lambda.csv", "Rx_Lx.csv", "omega.csv", "diagnostics.csv",
                 "score.csv", "score.txt", "score_by_period.csv", "trace.csv", "manifest.json"):
        assert (run / name).is_file(), name
    assert not (runs["m1"] / "omega.csv").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["config_hash"]) == 64
    metrics = {r["metric"] for r in read_rows(run / "score.csv")}
    assert {"waic", "p_waic", "rps_total", "rps_mean", "dss_total", "dss_mean"} <= metrics
    diag = read_rows(run / "diagnostics.csv")
    assert {r["metric"] for r in diag} == {"psrf", "acceptance"}


def test_plain_variant_links_constant_over_time(runs):
    rows = read_rows(runs["m1"] / "rho_lambda.csv")
    by_area = {}
    for r in rows:
        by_area.setdefault(r["area_id"], set()).add((r["rho_mean"], r["lambda_mean"]))
    assert all(len(v) == 1 for v in by_area.values())


def test_summary_recomputes_from_draws(runs):
    run = runs["m3"]
    draws = np.load(run / "samples" / "draws.npy")
    table = summarize_columns(draws)
    r = psrf_all(draws)
    rows = read_rows(run / "posterior_summary.csv")
    assert len(rows) == draws.shape[2]
    for k, row in enumerate(rows):
        values = [float(row[c]) for c in ("mean", "sd", "q2.5", "q50", "q97.5")]
        assert np.allclose(values, table[k], rtol=0, atol=1e-9)
        assert float(row["psrf"]) == pytest.approx(r[k], abs=1e-9)


def test_trace_long_format(runs):
    rows = read_rows(runs["m1"] / "trace.csv")
    assert set(rows[0]) == {"chain", "iteration", "parameter", "value"}
    assert int(rows[0]["iteration"]) == 81
    assert all("[" not in r["parameter"] for r in rows)


def test_forecast_and_score(runs):
    run = runs["m3"]
    total = read_rows(run / "forecast" / "forecast_total.csv")
    assert total[0]["period"] == "13"
    assert float(total[0]["q2.5"]) <= float(total[0]["q97.5"])
    evaluation = {r["metric"]: r["value"] for r in read_rows(run / "forecast" / "forecast_eval.csv")}
    assert set(evaluation) == {"period", "actual_total", "one_step_rps", "covered", "coverage_hits"}
    assert len(read_rows(run / "forecast" / "forecast_areas.csv")) == 9
    assert filecmp.cmp(run / "score.csv", runs["base"] / "rescore" / "score.csv", shallow=False)


def test_compare_sorted_by_waic(runs, capsys):
    out = runs["base"] / "cmp2"
    assert cli.main(["compare", str(runs["m1"]), str(runs["m3"]), "-o", str(out)]) == 0
    rows = read_rows(out / "compare.csv")
    waics = [float(r["waic"]) for r in rows]
    assert waics == sorted(waics)
    assert {r["variant"] for r in rows} == {"m1", "m3"}
    assert "variant" in capsys.readouterr().out


def test_compare_refuses_different_data(runs, capsys):
    other_sim = simulate(runs["base"], seed=6)
    other = runs["base"] / "other"
    assert fit(other_sim, other, "m1", ["--sampler.iterations=60", "--sampler.burnin=20"]) == 0
    assert cli.main(["compare", str(runs["m1"]), str(other)]) == cli.EXIT_INPUT
    assert "different data" in capsys.readouterr().err


def test_diag(runs, capsys):
    assert cli.main(["diag", str(runs["m1"]), "-o", str(runs["base"] / "diag2"), "--trace"]) == 0
    assert "max PSRF" in capsys.readouterr().out
    assert (runs["base"] / "diag2" / "trace.csv").is_file()


@pytest.mark.parametrize("command", ["simulate", "fit", "forecast", "compare", "diag", "score"])
def test_rerun_byte_identical(runs, command, tmp_path):
    sources = {
        "simulate": runs["sim"],
        "fit": runs["m1"],
        "forecast": runs["m3"] / "forecast",
        "compare": runs["base"] / "cmp",
        "diag": runs["m1"] / "diag",
        "score": runs["base"] / "rescore",
    }
    source = sources[command]
    again = tmp_path / "again"
    assert cli.main(["rerun", str(source / "manifest.json"), "-o", str(again)]) in (0, cli.EXIT_CONVERGENCE)
    produced = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert produced
    for rel in produced:
        assert filecmp.cmp(source / rel, again / rel, shallow=False), rel


class TestExitCodes:
    def test_convergence_warning(self, runs, tmp_path):
        code = fit(runs["sim"], tmp_path / "strict", "m1", ["--sampler.iterations=60", "--sampler.burnin=20",
                                                           "--output.psrf_threshold=0.5"])
        assert code == cli.EXIT_CONVERGENCE
        assert (tmp_path / "strict" / "posterior_summary.csv").is_file()

    def test_input_errors(self, tmp_path, capsys):
        bad = tmp_path / "counts.csv"
        bad.write_text("area_id,period,count\na,1,-1\n")
        (tmp_path / "adj.txt").write_text("a b\n")
        args = ["fit", "--data.counts=" + str(bad), "--data.adjacency=" + str(tmp_path / "adj.txt"), "-o", str(tmp_path / "o")]
        assert cli.main(args) == cli.EXIT_INPUT
        assert "negative count" in capsys.readouterr().err
        assert cli.main(["fit", "-o", str(tmp_path / "o")]) == cli.EXIT_INPUT
        assert cli.main(["fit", "-o", str(tmp_path / "o"), "--model.variant"]) == cli.EXIT_INPUT
        assert cli.main(["forecast", str(tmp_path)]) == cli.EXIT_INPUT
        assert cli.main(["rerun", str(tmp_path / "none.json"), "-o", str(tmp_path / "r")]) == cli.EXIT_INPUT

    def test_bad_variant(self, runs, tmp_path):
        assert fit(runs["sim"], tmp_path / "x", "m9") == cli.EXIT_INPUT

    def test_sampler_failure(self, runs, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise SamplerError("no finite start")

        monkeypatch.setattr(cli, "run", boom)
        assert fit(runs["sim"], tmp_path / "x", "m1") == cli.EXIT_SAMPLER


def test_threads_env_caps_workers(monkeypatch):
    from epimix.sampler import SamplerConfig, _n_workers

    monkeypatch.setenv("EPIMIX_THREADS", "1")
    assert _n_workers(SamplerConfig(n_chains=4, workers=8)) == 1
    monkeypatch.delenv("EPIMIX_THREADS")
    assert _n_workers(SamplerConfig(n_chains=2, workers=8)) == 2
