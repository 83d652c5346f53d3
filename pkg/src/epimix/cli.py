"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``forecast``, ``score``, ``compare``,
``diag`` and ``rerun``.  Each writes its files plus a ``manifest.json`` into
``--output``; ``epimix rerun MANIFEST --output DIR`` repeats a command from
its manifest and reproduces the same bytes.

Exit codes: 0 success, 2 input error, 3 sampler failure, 4 convergence
warning (some PSRF above the threshold; all files are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import psrf_all, summarize_columns
from .forecast import OMEGA_MODES, ForecastError, one_step_ahead
from .model import ModelError, ModelVariant, PanelData
from .posterior import coefficient_draws
from .priors import PriorConfig, PriorError
from .sampler import PosteriorSamples, SamplerConfig, SamplerError, flatten_state, parameter_layout, element_names, run
from .scoring import ScoringError, coverage, rps, score_fit
from .simulate import ScenarioError, scenario_from_mapping, scenario_to_mapping, simulate_panel
from .spatial_graph import GraphError, read_adjacency, row_standardize, write_adjacency

log = logging.getLogger("epimix")

EXIT_OK, EXIT_INPUT, EXIT_SAMPLER, EXIT_CONVERGENCE = 0, 2, 3, 4

# fixed stream ids so every random step has its own reproducible generator
_SCORE_STREAM, _FORECAST_STREAM = 1, 2

SUMMARY_HEADER = ["mean", "sd", "q2.5", "q50", "q97.5"]


class InputError(Exception):
    pass


# ---------------------------------------------------------------- run directories


def _save_run(out: Path, data: PanelData, graph, samples: PosteriorSamples) -> None:
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(parents=True, exist_ok=True)
    io.save_array(out / "samples" / "draws.npy", samples.draws)
    if samples.pointwise is not None:
        io.save_array(out / "samples" / "pointwise.npy", samples.pointwise)
    (out / "samples" / "layout.json").write_text(
        json.dumps([[name, list(shape)] for name, shape in samples.layout]) + "\n"
    )
    io.save_array(out / "data" / "y.npy", data.y)
    io.save_array(out / "data" / "x.npy", data.x)
    if data.holdout is not None:
        io.save_array(out / "data" / "holdout.npy", data.holdout)
    io.write_csv(out / "data" / "periods.csv", ["period"], ([p] for p in data.periods))
    io.write_index_map(out / "area_index.csv", data.area_ids)
    write_adjacency(out / "data" / "adjacency.txt", graph, data.area_ids)


def load_run(run_dir) -> tuple[dict, PanelData, object, PosteriorSamples]:
    """Manifest, panel, graph and posterior draws of a finished ``fit``."""
    run_dir = Path(run_dir)
    if not (run_dir / "samples" / "draws.npy").is_file():
        raise InputError(f"{run_dir}: not a fitted run directory")
    manifest = io.read_manifest(run_dir)
    if manifest.get("command") != "fit":
        raise InputError(f"{run_dir}: manifest is for {manifest.get('command')!r}, not a fit")
    cfg = manifest["config"]
    variant = ModelVariant(cfg["model"]["variant"], cfg["model"]["stationary_range"])
    area_ids = tuple(row["area_id"] for row in io.read_csv(run_dir / "area_index.csv"))
    periods = tuple(int(row["period"]) for row in io.read_csv(run_dir / "data" / "periods.csv"))
    holdout_path = run_dir / "data" / "holdout.npy"
    data = PanelData(
        y=io.load_array(run_dir / "data" / "y.npy"),
        x=io.load_array(run_dir / "data" / "x.npy"),
        holdout=io.load_array(holdout_path) if holdout_path.is_file() else None,
        area_ids=area_ids,
        periods=periods,
    )
    graph = read_adjacency(run_dir / "data" / "adjacency.txt", {a: i for i, a in enumerate(area_ids)})
    layout = [(name, tuple(shape)) for name, shape in json.loads((run_dir / "samples" / "layout.json").read_text())]
    pw_path = run_dir / "samples" / "pointwise.npy"
    samples = PosteriorSamples(
        variant=variant,
        layout=layout,
        names=element_names(layout),
        draws=io.load_array(run_dir / "samples" / "draws.npy"),
        pointwise=io.load_array(pw_path) if pw_path.is_file() else None,
        acceptance={},
    )
    return manifest, data, graph, samples


# ---------------------------------------------------------------- writers


def _write_summary(out: Path, samples: PosteriorSamples, r: np.ndarray | None) -> None:
    stats = summarize_columns(samples.draws)
    rows = []
    for k, name in enumerate(samples.names):
        rows.append([name, *stats[k], r[k] if r is not None else float("nan")])
    io.write_csv(out / "posterior_summary.csv", ["parameter", *SUMMARY_HEADER, "psrf"], rows)


def _write_links(out: Path, samples: PosteriorSamples, data: PanelData) -> None:
    rho, lam = coefficient_draws(samples, data.n_periods)
    rho_mean, lam_mean = rho.mean(axis=0), lam.mean(axis=0)
    p_rho, p_lam = (rho > 1.0).mean(axis=0), (lam > 1.0).mean(axis=0)
    rows = []
    for i, area in enumerate(data.area_ids):
        for k, period in enumerate(data.periods[1:]):
            rows.append([area, period, rho_mean[i, k], lam_mean[i, k], p_rho[i, k], p_lam[i, k]])
    io.write_csv(out / "rho_lambda.csv", ["area_id", "period", "rho_mean", "lambda_mean", "p_rho_gt1", "p_lambda_gt1"], rows)
    r_x = (rho > 1.0).sum(axis=1).mean(axis=0)
    l_x = (lam > 1.0).sum(axis=1).mean(axis=0)
    io.write_csv(out / "Rx_Lx.csv", ["period", "Rx_mean", "Lx_mean"], zip(data.periods[1:], r_x, l_x))
    if samples.variant.is_mixture:
        stats = summarize_columns(samples.pooled("omega"))
        io.write_csv(out / "omega.csv", ["period", *SUMMARY_HEADER],
                     ([p, *stats[k]] for k, p in enumerate(data.periods[1:])))


def _write_diagnostics(out: Path, samples: PosteriorSamples, r: np.ndarray | None) -> None:
    rows = []
    if r is not None:
        rows += [["psrf", name, "", value] for name, value in zip(samples.names, r)]
    for block in sorted(samples.acceptance):
        rows += [["acceptance", block, c, rate] for c, rate in enumerate(samples.acceptance[block])]
    io.write_csv(out / "diagnostics.csv", ["metric", "name", "chain", "value"], rows)


def _write_trace(out: Path, samples: PosteriorSamples, which: str) -> None:
    cols = [k for k, name in enumerate(samples.names) if which == "all" or "[" not in name]
    thin = samples.config.thin
    burn = samples.config.n_burnin
    rows = (
        [c, burn + d * thin + 1, samples.names[k], samples.draws[c, d, k]]
        for c in range(samples.n_chains)
        for d in range(samples.n_draws)
        for k in cols
    )
    io.write_csv(out / "trace.csv", ["chain", "iteration", "parameter", "value"], rows)


def _write_scores(out: Path, report) -> None:
    items = report.as_items()
    io.write_csv(out / "score.csv", ["metric", "value"], items)
    (out / "score.txt").write_text("".join(f"{k} = {io.fmt(v)}\n" for k, v in items))
    io.write_csv(out / "score_by_period.csv", ["period", "rps", "dss"],
                 zip(report.periods, report.rps_by_period, report.dss_by_period))


def _psrf(samples: PosteriorSamples) -> np.ndarray | None:
    if samples.n_chains < 2 or samples.n_draws < 10:
        log.warning("PSRF needs two chains of at least 10 draws; skipped")
        return None
    return psrf_all(samples.draws)


def _convergence_code(r: np.ndarray | None, names, threshold: float) -> int:
    if r is None:
        return EXIT_OK
    bad = [(n, v) for n, v in zip(names, r) if not v < threshold]
    if bad:
        worst = max(bad, key=lambda item: item[1])
        log.warning("%d parameter(s) have PSRF >= %s (worst %s = %.3f)", len(bad), threshold, worst[0], worst[1])
        return EXIT_CONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg, out: Path) -> int:
    try:
        scenario = scenario_from_mapping(dict(cfg.items("truth")) if cfg.has_section("truth") else {})
        data, truth, graph = simulate_panel(scenario)
    except (ScenarioError, ModelError, GraphError) as exc:
        raise InputError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    y_all = np.column_stack([data.y, data.holdout])
    periods = tuple(data.periods) + (data.periods[-1] + 1,)
    io.write_counts(out / "counts.csv", data.area_ids, periods, y_all)
    io.write_covariates(out / "covariates.csv", data.area_ids, data.population)
    write_adjacency(out / "adjacency.txt", graph, data.area_ids)
    variant = ModelVariant(scenario.variant, scenario.stationary_range)
    layout = parameter_layout(variant, data.n_areas, data.n_periods)
    io.write_csv(out / "truth.csv", ["parameter", "value"],
                 zip(element_names(layout), flatten_state(truth, layout)))
    fit = io.default_config()
    fit.set("data", "counts", "counts.csv")
    fit.set("data", "adjacency", "adjacency.txt")
    fit.set("data", "covariates", "covariates.csv")
    fit.set("data", "holdout", "true")
    fit.set("model", "variant", scenario.variant)
    fit.set("model", "stationary_range", scenario.stationary_range)
    with (out / "fit.ini").open("w") as fh:
        fit.write(fh)
    resolved = {"truth": scenario_to_mapping(scenario)}
    io.write_manifest(out / "manifest.json", "simulate", resolved)
    log.info("simulated %d areas x %d periods (+1 holdout) into %s", data.n_areas, data.n_periods, out)
    return EXIT_OK


def _sampler_config(cfg) -> SamplerConfig:
    try:
        return SamplerConfig(
            n_chains=io.get_int(cfg, "sampler", "chains"),
            n_iterations=io.get_int(cfg, "sampler", "iterations"),
            n_burnin=io.get_int(cfg, "sampler", "burnin"),
            thin=io.get_int(cfg, "sampler", "thin"),
            seed=io.get_int(cfg, "sampler", "seed"),
            store_pointwise=io.get_bool(cfg, "sampler", "store_pointwise"),
        )
    except ValueError as exc:
        raise InputError(f"[sampler] {exc}") from None


def cmd_fit(cfg, out: Path) -> int:
    counts = cfg.get("data", "counts")
    adjacency = cfg.get("data", "adjacency")
    if not counts or not adjacency:
        raise InputError("[data] counts and adjacency are required")
    try:
        data, graph = io.ingest(counts, adjacency, cfg.get("data", "covariates") or None,
                                holdout=io.get_bool(cfg, "data", "holdout"))
        variant = ModelVariant(cfg.get("model", "variant"), cfg.get("model", "stationary_range"))
    except (io.IngestError, ModelError, GraphError) as exc:
        raise InputError(str(exc)) from None
    sampler_config = _sampler_config(cfg)
    weights = row_standardize(graph)
    log.info("fitting %s: %d areas x %d periods, %d chain(s) x %d iterations",
             variant.kind, data.n_areas, data.n_periods, sampler_config.n_chains, sampler_config.n_iterations)
    try:
        samples = run(data, variant, weights, PriorConfig(), sampler_config)
    except (SamplerError, ModelError, PriorError) as exc:
        raise SamplerError(str(exc)) from None

    out.mkdir(parents=True, exist_ok=True)
    _save_run(out, data, graph, samples)
    (out / "samples" / "acceptance.json").write_text(
        json.dumps({k: v.tolist() for k, v in sorted(samples.acceptance.items())}, indent=1) + "\n"
    )
    r = _psrf(samples)
    _write_summary(out, samples, r)
    _write_links(out, samples, data)
    _write_diagnostics(out, samples, r)
    if io.get_bool(cfg, "output", "trace"):
        _write_trace(out, samples, cfg.get("output", "trace_params", fallback="scalars"))
    if samples.pointwise is not None:
        rng = np.random.default_rng([sampler_config.seed, _SCORE_STREAM])
        _write_scores(out, score_fit(samples, data, weights, rng))
    io.write_manifest(out / "manifest.json", "fit", io.config_dict(cfg),
                      {"data_hash": io.data_hash(data, graph), "seed": sampler_config.seed})
    return _convergence_code(r, samples.names, io.get_float(cfg, "output", "psrf_threshold"))


def cmd_score(cfg, out: Path) -> int:
    manifest, data, graph, samples = load_run(cfg.get("score", "run_dir"))
    if samples.pointwise is None:
        raise InputError("run was fitted without pointwise log-likelihood")
    seed = int(manifest["seed"])
    rng = np.random.default_rng([seed, _SCORE_STREAM])
    out.mkdir(parents=True, exist_ok=True)
    _write_scores(out, score_fit(samples, data, row_standardize(graph), rng))
    io.write_manifest(out / "manifest.json", "score", io.config_dict(cfg), {"data_hash": manifest["data_hash"]})
    return EXIT_OK


def cmd_forecast(cfg, out: Path) -> int:
    manifest, data, graph, samples = load_run(cfg.get("forecast", "run_dir"))
    mode = cfg.get("forecast", "omega_mode")
    if mode not in OMEGA_MODES:
        raise InputError(f"[forecast] omega_mode must be one of {OMEGA_MODES}")
    seed_text = cfg.get("forecast", "seed", fallback="")
    seed = int(seed_text) if seed_text else int(manifest["seed"])
    rng = np.random.default_rng([seed, _FORECAST_STREAM])
    draws = one_step_ahead(samples, data, samples.variant, row_standardize(graph), rng, omega_mode=mode)
    out.mkdir(parents=True, exist_ok=True)
    stats = draws.area_summary()
    io.write_csv(out / "forecast_areas.csv", ["area_id", *SUMMARY_HEADER],
                 ([a, *stats[i]] for i, a in enumerate(data.area_ids)))
    next_period = data.periods[-1] + 1
    io.write_csv(out / "forecast_total.csv", ["period", *SUMMARY_HEADER], [[next_period, *draws.total_summary()]])
    if data.holdout is not None:
        actual = int(data.holdout.sum())
        total = draws.total_summary()
        area_hits = [coverage(stats[i, 2], stats[i, 4], data.holdout[i]) for i in range(data.n_areas)]
        rows = [
            ["period", next_period],
            ["actual_total", actual],
            ["one_step_rps", rps(draws.totals, actual)],
            ["covered", coverage(total[2], total[4], actual)],
            ["coverage_hits", float(np.mean(area_hits))],
        ]
        io.write_csv(out / "forecast_eval.csv", ["metric", "value"], rows)
    io.write_manifest(out / "manifest.json", "forecast", io.config_dict(cfg),
                      {"data_hash": manifest["data_hash"], "seed": seed})
    return EXIT_OK


def _read_pairs(path) -> dict[str, str]:
    return {row["metric"]: row["value"] for row in io.read_csv(path)}


def cmd_compare(cfg, out: Path | None) -> int:
    runs = [r.strip() for r in cfg.get("compare", "runs").split(",") if r.strip()]
    if not runs:
        raise InputError("no runs to compare")
    rows, hashes = [], set()
    for run_dir in runs:
        run_dir = Path(run_dir)
        manifest = io.read_manifest(run_dir)
        if manifest.get("command") != "fit":
            raise InputError(f"{run_dir}: not a fitted run")
        hashes.add(manifest["data_hash"])
        if not (run_dir / "score.csv").is_file():
            raise InputError(f"{run_dir}: no score.csv")
        score = _read_pairs(run_dir / "score.csv")
        fc_path = run_dir / "forecast" / "forecast_eval.csv"
        fc = _read_pairs(fc_path) if fc_path.is_file() else {}
        rows.append([
            str(run_dir),
            manifest["config"]["model"]["variant"],
            float(score["waic"]),
            float(score["p_waic"]),
            float(score["rps_total"]),
            float(score["dss_total"]),
            float(fc["one_step_rps"]) if "one_step_rps" in fc else float("nan"),
            int(fc["covered"]) if "covered" in fc else "",
        ])
    if len(hashes) > 1:
        raise InputError("runs were fitted to different data; refusing to compare")
    rows.sort(key=lambda row: (row[2], row[0]))
    header = ["run", "variant", "waic", "p_waic", "rps_total", "dss_total", "one_step_rps", "covered"]
    width = max(len(r[0]) for r in rows)
    print(f"{'run':<{width}}  variant  {'waic':>12}  {'rps_total':>12}  {'dss_total':>12}  {'one_step_rps':>12}  covered")
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<7}  {r[2]:12.2f}  {r[4]:12.2f}  {r[5]:12.2f}  {r[6]:12.2f}  {r[7]}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        io.write_csv(out / "compare.csv", header, rows)
        io.write_manifest(out / "manifest.json", "compare", io.config_dict(cfg), {"data_hash": hashes.pop()})
    return EXIT_OK


def cmd_diag(cfg, out: Path) -> int:
    run_dir = Path(cfg.get("diag", "run_dir"))
    manifest, data, graph, samples = load_run(run_dir)
    acc_path = run_dir / "samples" / "acceptance.json"
    if acc_path.is_file():
        samples.acceptance = {k: np.asarray(v) for k, v in json.loads(acc_path.read_text()).items()}
    sampler = manifest["config"]["sampler"]
    samples.config = SamplerConfig(
        n_chains=samples.n_chains, n_iterations=int(sampler["iterations"]),
        n_burnin=int(sampler["burnin"]), thin=int(sampler["thin"]),
    )
    r = _psrf(samples)
    out.mkdir(parents=True, exist_ok=True)
    _write_diagnostics(out, samples, r)
    if io.get_bool(cfg, "diag", "trace"):
        _write_trace(out, samples, cfg.get("diag", "trace_params"))
    if r is not None:
        worst = int(np.argmax(r))
        print(f"max PSRF {r[worst]:.4f} ({samples.names[worst]}); {int(np.sum(r >= 1.1))} of {r.size} at or above 1.1")
    io.write_manifest(out / "manifest.json", "diag", io.config_dict(cfg), {"data_hash": manifest["data_hash"]})
    threshold = float(manifest["config"]["output"].get("psrf_threshold", "1.1"))
    return _convergence_code(r, samples.names, threshold)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "score": cmd_score,
    "forecast": cmd_forecast,
    "compare": cmd_compare,
    "diag": cmd_diag,
}


# ---------------------------------------------------------------- argument handling


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epimix", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    def common(p, needs_output=True):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--output", "-o", required=needs_output, help="output directory")

    p = sub.add_parser("simulate", parents=[verbose], help="simulate a synthetic panel ([truth] section)")
    common(p)
    p = sub.add_parser("fit", parents=[verbose], help="fit a model variant by MCMC")
    common(p)
    for name in ("score", "diag"):
        p = sub.add_parser(name, parents=[verbose], help=f"{name} a fitted run")
        p.add_argument("run_dir")
        common(p, needs_output=False)
    sub.choices["diag"].add_argument("--trace", action="store_true", help="also write trace.csv")
    p = sub.add_parser("forecast", parents=[verbose], help="one-step-ahead forecast from a fitted run")
    p.add_argument("run_dir")
    common(p, needs_output=False)
    p.add_argument("--omega-mode", choices=OMEGA_MODES)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("compare", parents=[verbose], help="compare fitted runs on the same data")
    p.add_argument("runs", nargs="+")
    common(p, needs_output=False)
    p = sub.add_parser("rerun", parents=[verbose], help="repeat a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--output", "-o", required=True)
    return parser


def _build_config(args, overrides):
    cfg = io.load_config(args.config, overrides)
    command = args.command
    if command in ("score", "forecast", "diag"):
        section = command
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, "run_dir", str(Path(args.run_dir).resolve()))
    if command == "diag":
        cfg.set("diag", "trace", str(bool(args.trace)).lower())
        if not cfg.has_option("diag", "trace_params"):
            cfg.set("diag", "trace_params", "scalars")
    if command == "forecast":
        if args.omega_mode:
            cfg.set("forecast", "omega_mode", args.omega_mode)
        if args.seed is not None:
            cfg.set("forecast", "seed", str(args.seed))
    if command == "compare":
        if not cfg.has_section("compare"):
            cfg.add_section("compare")
        cfg.set("compare", "runs", ",".join(str(Path(r).resolve()) for r in args.runs))
    if command == "simulate":
        # the simulate manifest records only the scenario
        for section in list(cfg.sections()):
            if section != "truth":
                cfg.remove_section(section)
    return cfg


def _default_output(args) -> Path | None:
    if args.output:
        return Path(args.output)
    if args.command in ("score", "forecast", "diag"):
        return Path(args.run_dir) / args.command
    return None


def execute(command: str, cfg, out: Path | None) -> int:
    """Run one command with a fully resolved configuration."""
    try:
        return COMMANDS[command](cfg, out)
    except (InputError, io.IngestError, io.ConfigError, GraphError, ScenarioError) as exc:
        print(f"epimix {command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelError, ForecastError, ScoringError) as exc:
        print(f"epimix {command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SamplerError as exc:
        print(f"epimix {command}: sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    unknown = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if unknown:
        print(f"epimix: unrecognised arguments {unknown}", file=sys.stderr)
        return EXIT_INPUT
    if args.command == "rerun":
        if extra:
            print("epimix rerun: overrides are not accepted", file=sys.stderr)
            return EXIT_INPUT
        try:
            manifest = io.read_manifest(args.manifest)
            command = manifest["command"]
            cfg = io.config_from_dict(manifest["config"])
        except (io.ConfigError, KeyError, ValueError) as exc:
            print(f"epimix rerun: bad manifest: {exc}", file=sys.stderr)
            return EXIT_INPUT
        return execute(command, cfg, Path(args.output))
    try:
        cfg = _build_config(args, extra)
    except io.ConfigError as exc:
        print(f"epimix {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return execute(args.command, cfg, _default_output(args))


if __name__ == "__main__":
    sys.exit(main())
