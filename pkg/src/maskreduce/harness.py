"""Experiment orchestration: config files, per-cell runs, CSV metrics, TTA summaries.

Config files are INI-style ``key = value`` sections::

    [experiment]
    name = desk                      ; required
    modes = full, packed             ; full, fp16, topk@RATE, packed, packed+ternary
    bandwidths = 100Mbps, 1Gbps      ; units bps, Kbps, Mbps, Gbps
    latency = 0                      ; seconds, or with ms/us suffix
    target_accuracy = auto           ; auto = 0.9 x final accuracy of the dense full run
    output = results
    transport = sim                  ; sim or tcp
    parallel = false                 ; run independent cells in worker processes
    prune_baselines = false          ; also prune full/fp16/topk runs

    [train]
    epochs = 100
    batch_size = 32
    lr = 0.05
    workers = 8
    seed = 0
    warmup_epochs = 2
    stability_threshold = 3
    samples = 5000
    layers = 64, 128, 10
    compute_seconds = 0              ; simulated compute time per iteration

    [prune]
    ratio = 0.5
    method = magnitude               ; magnitude or grasp
    scope = layer                    ; layer or global
    grasp_epsilon = 0.001
    grasp_keep = negative            ; negative or positive
"""
from __future__ import annotations

import concurrent.futures
import configparser
import csv
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .collective import SyncMode
from .errors import ConfigError, MissingFile, ParseError, UnknownKey
from .sparsity import PruneConfig
from .trainer import EpochMetrics, TrainConfig, train
from .transport import LinkModel

CSV_FIELDS = ["epoch", "loss", "test_acc", "bytes", "sim_seconds_cum", "mode"]
SUMMARY_FIELDS = ["bandwidth_bps", "mode", "tta_seconds", "speedup", "final_acc", "total_bytes", "status"]
DEFAULT_TARGET_FRACTION = 0.9
PAPER_BANDWIDTHS = ("100Mbps", "500Mbps", "1Gbps")
ALL_MODES = ("full", "fp16", "topk@0.1", "topk@0.01", "packed", "packed+ternary")

_UNITS = {"bps": 1.0, "kbps": 1e3, "mbps": 1e6, "gbps": 1e9}
_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6}


@dataclass(frozen=True)
class ModeSpec:
    label: str
    mode: SyncMode
    topk_rate: float = 0.1

    @property
    def pruned(self) -> bool:
        return self.mode in (SyncMode.PACKED, SyncMode.TERNARY)

    @property
    def order(self) -> tuple:
        rank = [SyncMode.FULL, SyncMode.FP16, SyncMode.TOPK, SyncMode.PACKED, SyncMode.TERNARY].index(self.mode)
        return (rank, -self.topk_rate)

    @classmethod
    def parse(cls, text: str) -> ModeSpec:
        label = text.strip().lower()
        if label.startswith("topk"):
            _, _, rate = label.partition("@")
            rate = float(rate) if rate else 0.1
            if not 0 < rate <= 1:
                raise ValueError(f"TopK rate {rate} outside (0, 1]")
            return cls(f"topk@{rate:g}", SyncMode.TOPK, rate)
        return cls(label, SyncMode(label))

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9.]+", "-", self.label)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    train: TrainConfig = field(default_factory=TrainConfig)
    bandwidths: tuple[float, ...] = (100e6, 500e6, 1e9)
    latency_s: float = 0.0
    modes: tuple[ModeSpec, ...] = tuple(ModeSpec.parse(m) for m in ALL_MODES)
    target_accuracy: float | None = None
    output: Path = Path("results")
    transport: str = "sim"
    parallel: bool = False
    prune_baselines: bool = False

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("at least one sync mode is required")
        if self.target_accuracy is not None and not 0 < self.target_accuracy < 1:
            raise ConfigError("target accuracy must lie in (0, 1)")
        if self.transport not in ("sim", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")

    def cell_config(self, spec: ModeSpec) -> TrainConfig:
        prune = self.train.prune
        if not (spec.pruned or self.prune_baselines):
            prune = PruneConfig(0.0, prune.method, prune.grasp_epsilon, prune.grasp_keep_negative, prune.scope)
        return self.train.with_(mode=spec.mode, topk_rate=spec.topk_rate, prune=prune)


def parse_bandwidth(text: str) -> float:
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*", text)
    if not m:
        raise ValueError(f"cannot parse bandwidth {text!r}")
    unit = (m.group(2) or "bps").lower()
    if unit not in _UNITS:
        raise ValueError(f"unknown bandwidth unit {m.group(2)!r}")
    value = float(m.group(1)) * _UNITS[unit]
    if value <= 0:
        raise ValueError("bandwidth must be positive")
    return value


def parse_duration(text: str) -> float:
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-z]*)\s*", text)
    if not m or (m.group(2) or "s") not in _TIME_UNITS:
        raise ValueError(f"cannot parse duration {text!r}")
    return float(m.group(1)) * _TIME_UNITS[m.group(2) or "s"]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


_SCHEMA = {
    "experiment": {
        "name": str,
        "modes": lambda s: tuple(sorted((ModeSpec.parse(m) for m in s.split(",") if m.strip()),
                                        key=lambda spec: spec.order)),
        "bandwidths": lambda s: tuple(sorted(parse_bandwidth(b) for b in s.split(",") if b.strip())),
        "latency": parse_duration,
        "target_accuracy": lambda s: None if s.strip().lower() == "auto" else float(s),
        "output": Path,
        "transport": str.strip,
        "parallel": _bool,
        "prune_baselines": _bool,
    },
    "train": {
        "epochs": int, "batch_size": int, "lr": float, "workers": int, "seed": int,
        "warmup_epochs": int, "stability_threshold": int, "samples": int, "layers": _ints,
        "compute_seconds": parse_duration,
    },
    "prune": {
        "ratio": float, "method": str.strip, "scope": str.strip, "grasp_epsilon": float,
        "grasp_keep": lambda s: {"negative": True, "positive": False}[s.strip().lower()],
    },
}

_TRAIN_FIELDS = {"samples": "n_samples", "layers": "layer_sizes", "compute_seconds": "compute_seconds_per_iteration"}
_EXPERIMENT_FIELDS = {"latency": "latency_s"}


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped, re.IGNORECASE):
            return lineno
    return None


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"expected a [section] header, got {exc.line.strip()!r}", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ParseError(f"malformed line {line.strip()!r}", lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ParseError(str(exc).split(": ", 1)[-1], exc.lineno) from None

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise UnknownKey(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise UnknownKey(f"unknown key {key!r} in [{section}] (line {_line_of(text, section, key)})")
            try:
                values[(section, key)] = _SCHEMA[section][key](raw)
            except (ValueError, KeyError) as exc:
                raise ParseError(f"bad value for {section}.{key}: {exc}", _line_of(text, section, key)) from None

    if ("experiment", "name") not in values:
        raise ConfigError("[experiment] name is required")

    prune_kwargs = {}
    for key, value in ((k, v) for (s, k), v in values.items() if s == "prune"):
        prune_kwargs["grasp_keep_negative" if key == "grasp_keep" else key] = value
    train_kwargs = {_TRAIN_FIELDS.get(k, k): v for (s, k), v in values.items() if s == "train"}
    exp_kwargs = {_EXPERIMENT_FIELDS.get(k, k): v for (s, k), v in values.items() if s == "experiment"}
    try:
        if "layer_sizes" in train_kwargs:
            train_kwargs["classes"] = train_kwargs["layer_sizes"][-1]
        tc = TrainConfig(prune=PruneConfig(**prune_kwargs), **train_kwargs)
        return ExperimentConfig(train=tc, **exp_kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


# --- records -----------------------------------------------------------

@dataclass
class RunRecord:
    bandwidth_bps: float
    mode: str
    config_hash: str
    rows: list = field(default_factory=list)
    tta_seconds: float | None = None
    speedup: float | None = None
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error:
            return f"failed: {self.error}"
        return "ok" if self.tta_seconds is not None else "not converged"

    @property
    def final_accuracy(self) -> float | None:
        return self.rows[-1]["test_acc"] if self.rows else None

    @property
    def total_bytes(self) -> int:
        return sum(r["bytes"] for r in self.rows)


def config_hash(cfg: TrainConfig, bandwidth_bps: float, latency_s: float) -> str:
    blob = json.dumps({"train": asdict(cfg), "bandwidth": bandwidth_bps, "latency": latency_s},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def time_to_accuracy(rows, target: float) -> float | None:
    for r in rows:
        if r["test_acc"] >= target:
            return r["sim_seconds_cum"]
    return None


def metrics_rows(metrics: list[EpochMetrics]) -> list[dict]:
    return [{"epoch": m.epoch, "loss": m.train_loss, "test_acc": m.test_accuracy, "bytes": m.bytes_on_wire,
             "sim_seconds_cum": m.simulated_seconds, "mode": m.dominant_mode} for m in metrics]


def write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["loss"])), repr(float(r["test_acc"])), r["bytes"],
                        repr(float(r["sim_seconds_cum"])), r["mode"]])


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return [{"epoch": int(r["epoch"]), "loss": float(r["loss"]), "test_acc": float(r["test_acc"]),
                 "bytes": int(r["bytes"]), "sim_seconds_cum": float(r["sim_seconds_cum"]), "mode": r["mode"]}
                for r in reader]


def bandwidth_label(bps: float) -> str:
    for unit, scale in (("Gbps", 1e9), ("Mbps", 1e6), ("Kbps", 1e3)):
        if bps >= scale and (bps / scale) == int(bps / scale):
            return f"{int(bps / scale)}{unit}"
    return f"{bps:g}bps"


def cell_filename(bps: float, spec_label: str) -> str:
    return f"{bandwidth_label(bps)}__{re.sub(r'[^a-z0-9.]+', '-', spec_label)}.csv"


def _run_cell(cfg: TrainConfig, bps: float, latency: float, transport: str):
    try:
        return metrics_rows(train(cfg, LinkModel(bps, latency), transport=transport).metrics), None
    except Exception as exc:  # noqa: BLE001 - a failed cell must not abort the others
        return [], f"{type(exc).__name__}: {exc}".splitlines()[0]


def run_experiment(cfg: ExperimentConfig, log=print) -> list[RunRecord]:
    """Run every (bandwidth, mode) cell, write per-cell CSVs, ``experiment.json`` and the summary."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(bps, spec) for bps in cfg.bandwidths for spec in cfg.modes]
    jobs = [(cfg.cell_config(spec), bps, cfg.latency_s, cfg.transport) for bps, spec in cells]

    if cfg.parallel:
        with concurrent.futures.ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        results = []
        for (bps, spec), job in zip(cells, jobs):
            log(f"[{cfg.name}] {bandwidth_label(bps)} {spec.label} ...")
            results.append(_run_cell(*job))

    manifest_cells = []
    for (bps, spec), job, (rows, error) in zip(cells, jobs, results):
        name = cell_filename(bps, spec.label)
        if not error:
            write_rows(out / name, rows)
        manifest_cells.append({"bandwidth_bps": bps, "mode": spec.label, "file": name,
                               "config_hash": config_hash(job[0], bps, cfg.latency_s), "error": error})

    target = cfg.target_accuracy
    if target is None:
        dense = next((rows for (_, spec), (rows, err) in zip(cells, results)
                      if spec.mode is SyncMode.FULL and not err), None)
        if dense is None:
            log(f"[{cfg.name}] running dense baseline to derive the target accuracy")
            dense, err = _run_cell(cfg.cell_config(ModeSpec.parse("full")), cfg.bandwidths[0], cfg.latency_s,
                                   cfg.transport)
            if err:
                raise RuntimeError(f"dense baseline failed: {err}")
        target = DEFAULT_TARGET_FRACTION * dense[-1]["test_acc"]

    manifest = {"name": cfg.name, "target_accuracy": target, "cells": manifest_cells}
    (out / "experiment.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summarize_dir(out)


def summarize(records: list[RunRecord], target: float) -> list[RunRecord]:
    """Fill TTA and speedup vs the full-precision all-reduce run at the same bandwidth."""
    for r in records:
        r.tta_seconds = time_to_accuracy(r.rows, target) if not r.error else None
    for r in records:
        base = next((b for b in records if b.bandwidth_bps == r.bandwidth_bps and b.mode == "full"), None)
        if base is not None and base.tta_seconds is not None and r.tta_seconds is not None:
            r.speedup = base.tta_seconds / r.tta_seconds if r.tta_seconds > 0 else math.inf
        else:
            r.speedup = None
    records.sort(key=lambda r: (r.bandwidth_bps, ModeSpec.parse(r.mode).order))
    return records


def _fmt(value, spec=".6g"):
    return "" if value is None else format(value, spec)


def summary_table(records: list[RunRecord]) -> list[list[str]]:
    rows = [SUMMARY_FIELDS]
    for r in records:
        rows.append([bandwidth_label(r.bandwidth_bps), r.mode, _fmt(r.tta_seconds), _fmt(r.speedup, ".4g"),
                     _fmt(r.final_accuracy, ".4f"), str(r.total_bytes), r.status])
    return rows


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def summarize_dir(path) -> list[RunRecord]:
    """Recompute TTA/speedups from the per-cell CSVs and write ``summary.csv`` and ``summary.txt``."""
    path = Path(path)
    manifest_path = path / "experiment.json"
    if not manifest_path.is_file():
        raise MissingFile(f"no experiment.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    records = []
    for cell in manifest["cells"]:
        rec = RunRecord(cell["bandwidth_bps"], cell["mode"], cell["config_hash"], error=cell.get("error"))
        if not rec.error:
            rec.rows = read_rows(path / cell["file"])
        records.append(rec)
    summarize(records, manifest["target_accuracy"])
    table = summary_table(records)
    with open(path / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table[0])
        for r in records:
            w.writerow([repr(float(r.bandwidth_bps)), r.mode, "" if r.tta_seconds is None else repr(r.tta_seconds),
                        "" if r.speedup is None else repr(r.speedup),
                        "" if r.final_accuracy is None else repr(r.final_accuracy), r.total_bytes, r.status])
    text = f"# {manifest['name']}  target accuracy {manifest['target_accuracy']:.4f}\n" + format_table(table)
    (path / "summary.txt").write_text(text, encoding="utf-8")
    return records
