"""File formats: count/covariate CSVs, run configuration, manifests and arrays."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .model import PanelData, center_covariate
from .spatial_graph import AdjacencyGraph, GraphError, read_adjacency


class IngestError(ValueError):
    """Malformed input file; the message carries the file and location."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- CSV input


def _rows(path, required):
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestError(f"{path}: missing column(s) {missing}; header is {header}")
        reader.fieldnames = header
        for lineno, row in enumerate(reader, start=2):
            yield lineno, {k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()}


def _number(path, lineno, column, text, kind=float):
    try:
        value = kind(text)
    except (TypeError, ValueError):
        raise IngestError(f"{path}:{lineno}: column {column!r}: non-numeric value {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise IngestError(f"{path}:{lineno}: column {column!r}: non-finite value {text!r}")
    return value


def read_counts(path) -> tuple[tuple[str, ...], tuple[int, ...], np.ndarray]:
    """Read a dense ``area_id,period,count`` table.

    Returns area ids in lexicographic order, sorted periods and the
    ``(areas, periods)`` count matrix.
    """
    cells: dict[tuple[str, int], int] = {}
    for lineno, row in _rows(path, ("area_id", "period", "count")):
        area = row["area_id"]
        if not area:
            raise IngestError(f"{path}:{lineno}: column 'area_id': empty value")
        period = _number(path, lineno, "period", row["period"], int)
        count = _number(path, lineno, "count", row["count"], int)
        if count < 0:
            raise IngestError(f"{path}:{lineno}: column 'count': negative count {count}")
        key = (area, period)
        if key in cells:
            raise IngestError(f"{path}:{lineno}: duplicate cell (area {area}, period {period})")
        cells[key] = count
    if not cells:
        raise IngestError(f"{path}: no data rows")
    areas = tuple(sorted({a for a, _ in cells}))
    periods = tuple(sorted({p for _, p in cells}))
    y = np.empty((len(areas), len(periods)), dtype=np.int64)
    for i, a in enumerate(areas):
        for k, p in enumerate(periods):
            if (a, p) not in cells:
                raise IngestError(f"{path}: missing cell (area {a}, period {p})")
            y[i, k] = cells[(a, p)]
    return areas, periods, y


def read_covariates(path, area_index: dict[str, int]) -> np.ndarray:
    """Population per area from an ``area_id,population`` table, in index order."""
    pop = np.full(len(area_index), np.nan)
    for lineno, row in _rows(path, ("area_id", "population")):
        area = row["area_id"]
        if area not in area_index:
            raise IngestError(f"{path}:{lineno}: column 'area_id': unknown area {area!r}")
        value = _number(path, lineno, "population", row["population"])
        if value <= 0:
            raise IngestError(f"{path}:{lineno}: column 'population': must be positive")
        pop[area_index[area]] = value
    absent = [a for a, i in area_index.items() if np.isnan(pop[i])]
    if absent:
        raise IngestError(f"{path}: no population for area(s) {absent}")
    return pop


def ingest(counts_path, adjacency_path, covariate_path=None, holdout: bool = False) -> tuple[PanelData, AdjacencyGraph]:
    """Load a panel and its adjacency graph.

    The covariate is ``population / 1e5`` centred to mean zero (all zeros
    without a covariate file).  With ``holdout`` the final period is kept
    aside as ``PanelData.holdout``.
    """
    areas, periods, y = read_counts(counts_path)
    index = {a: i for i, a in enumerate(areas)}
    try:
        graph = read_adjacency(adjacency_path, index)
    except FileNotFoundError:
        raise IngestError(f"{adjacency_path}: file not found") from None
    except GraphError as exc:
        raise IngestError(str(exc)) from None
    population = read_covariates(covariate_path, index) if covariate_path else None
    x = center_covariate(population) if population is not None else np.zeros(len(areas))
    held = None
    if holdout:
        if y.shape[1] < 3:
            raise IngestError(f"{counts_path}: holdout needs at least 3 periods")
        held, y, periods = y[:, -1].copy(), y[:, :-1], periods[:-1]
    elif y.shape[1] < 2:
        raise IngestError(f"{counts_path}: need at least 2 periods")
    data = PanelData(y=y, x=x, holdout=held, area_ids=areas, periods=periods, population=population)
    return data, graph


def data_hash(data: PanelData, graph: AdjacencyGraph) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.y, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(data.x, dtype=float).tobytes())
    if data.holdout is not None:
        h.update(np.ascontiguousarray(data.holdout, dtype=np.int64).tobytes())
    h.update(json.dumps([list(data.area_ids), list(data.periods), graph.edges()]).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- CSV output


def fmt(value) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else str(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_counts(path, area_ids, periods, y) -> None:
    write_csv(path, ["area_id", "period", "count"],
              ((a, p, int(y[i, k])) for i, a in enumerate(area_ids) for k, p in enumerate(periods)))


def write_covariates(path, area_ids, population) -> None:
    write_csv(path, ["area_id", "population"], zip(area_ids, population))


def write_index_map(path, area_ids) -> None:
    write_csv(path, ["index", "area_id"], enumerate(area_ids))


# ---------------------------------------------------------------- config

#: documented keys and their defaults; values are kept as strings
CONFIG_SCHEMA: dict[str, dict[str, str]] = {
    "data": {"counts": "", "adjacency": "", "covariates": "", "holdout": "false"},
    "model": {"variant": "m4", "stationary_range": "unit"},
    "sampler": {
        "chains": "2",
        "iterations": "20000",
        "burnin": "10000",
        "thin": "1",
        "seed": "1",
        "store_pointwise": "true",
    },
    "output": {"trace": "false", "trace_params": "scalars", "psrf_threshold": "1.1"},
    "forecast": {"omega_mode": "carry", "seed": ""},
}


def default_config() -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(CONFIG_SCHEMA)
    return cfg


def apply_overrides(cfg: configparser.ConfigParser, overrides) -> None:
    """Apply ``section.key=value`` (or unambiguous ``key=value``) overrides."""
    for item in overrides:
        text = item[2:] if item.startswith("--") else item
        if "=" not in text:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = text.split("=", 1)
        if "." in key:
            section, option = key.split(".", 1)
        else:
            hits = [s for s in cfg.sections() if cfg.has_option(s, key)]
            if len(hits) != 1:
                raise ConfigError(f"override key {key!r} is {'ambiguous' if hits else 'unknown'}; use section.key")
            section, option = hits[0], key
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, option, value)


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    """Defaults, then the INI file (relative paths resolved against it), then overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
        for section, key in (("data", "counts"), ("data", "adjacency"), ("data", "covariates"), ("truth", "adjacency")):
            value = cfg.get(section, key, fallback="")
            if value and not Path(value).is_absolute():
                cfg.set(section, key, str(base / value))
    apply_overrides(cfg, overrides)
    return cfg


def config_dict(cfg: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    return {s: dict(sorted(cfg.items(s))) for s in sorted(cfg.sections())}


def config_from_dict(values: dict) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(values)
    return cfg


def config_hash(values: dict) -> str:
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()


def get_bool(cfg, section, key) -> bool:
    try:
        return cfg.getboolean(section, key)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a boolean") from None


def get_int(cfg, section, key) -> int:
    try:
        return cfg.getint(section, key)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer") from None


def get_float(cfg, section, key) -> float:
    try:
        return cfg.getfloat(section, key)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number") from None


# ---------------------------------------------------------------- manifest


def write_manifest(path, command: str, config: dict, extra: dict | None = None) -> dict:
    """Write a JSON manifest (no timestamps, so re-runs are byte-identical)."""
    from . import __version__

    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"{path}: manifest not found")
    return json.loads(path.read_text())


def save_array(path, array) -> None:
    np.save(path, np.ascontiguousarray(array), allow_pickle=False)


def load_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
