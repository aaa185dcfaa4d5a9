"""Experiment orchestration: config hashing, per-run persistence, grids and aggregation.

A run is one (method, budget, seed) cell. Each run writes ``config.json``,
``log.jsonl``, ``checkpoint.json``, ``report.json`` and ``report.csv`` into its
own directory. Wall times only go to ``record.json`` so reports stay
byte-identical across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
import subprocess
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (DatasetSchema, Standardizer, builtin_schema, compute_cost_weights,
                   compute_feature_stats, load_dataset, make_two_gaussians, split_dataset)
from .metrics import stability_report
from .nn import ModelGraph, accuracy
from .ptq import VARIANTS as PTQ_VARIANTS, run_cfptq
from .recourse import ActionSet, SolverConfig
from .train import (BASELINES, CfqConfig, TrainingData, baseline_train, hard_bit_cost, pretrain_teacher,
                    train_cfq, uniform_bits_for_budget)

METHODS = BASELINES + ("cfq", "cfq-uniform") + PTQ_VARIANTS
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
CURVE_BUDGETS = (0.25, 0.4, 0.55, 0.7, 0.85)
NOISE_GRID = (0.0, 0.01, 0.05, 0.10)
DEFAULT_SOLVER = {"steps": 200, "restarts": 2, "target_margin": 0.25}
DEFAULT_METRICS = {"rho": 0.05, "n_samples": 64, "with_epsilon": True}
AGG_METRICS = ("vd", "vd_mismatch", "crg", "act_overlap", "frr_f", "frr_q")


class RunExistsError(RuntimeError):
    """Raised when an experiment with the same config hash already has results."""


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    method: str = "cfq"
    dataset: str = "synthetic"          # "synthetic" or a CSV path
    schema: str | None = None           # JSON path or built-in layout name (CSV datasets)
    synthetic: dict = field(default_factory=lambda: {"n": 2000, "d": 10, "separation": 2.5})
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    budgets: list = field(default_factory=lambda: [0.5])
    reference_bits: float = 8.0         # normalized budget = average bits / reference_bits
    hidden: list = field(default_factory=lambda: [32])
    teacher_epochs: int = 30
    teacher_lr: float = 0.05
    cost_mode: str = "inverse-std"
    train: dict = field(default_factory=dict)
    solver: dict = field(default_factory=lambda: dict(DEFAULT_SOLVER))
    metrics: dict = field(default_factory=lambda: dict(DEFAULT_METRICS))
    calib_size: int | None = None
    eval_limit: int | None = None
    label: str | None = None            # row label in tables (defaults to the method)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.budgets or any(not (0 < float(b) <= 1) for b in self.budgets):
            raise ValueError("budgets must be fractions in (0, 1]")
        if not self.reference_bits > 0:
            raise ValueError("reference_bits must be positive")
        self.seeds = [int(s) for s in self.seeds]
        self.budgets = [float(b) for b in self.budgets]
        CfqConfig.from_dict(self.train)   # validate overrides early
        SolverConfig(**{**DEFAULT_SOLVER, **self.solver})

    @property
    def row_label(self) -> str:
        return self.label or self.method

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


@dataclass
class RunRecord:
    config_hash: str
    version: str
    runs: list
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.runs)

    def to_dict(self) -> dict:
        return asdict(self)


def version_string() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# task preparation

@dataclass
class Task:
    data: TrainingData
    x_test: np.ndarray
    y_test: np.ndarray
    groups_test: np.ndarray | None
    teacher: ModelGraph


def _load_schema(ref: str | None) -> DatasetSchema:
    if ref is None:
        raise ValueError("CSV datasets need a schema (JSON path or built-in name)")
    if Path(ref).exists():
        return DatasetSchema.from_json(ref)
    return builtin_schema(ref)


@lru_cache(maxsize=16)
def _prepare_cached(data_key: str, seed: int) -> Task:
    spec = json.loads(data_key)
    if spec["dataset"] == "synthetic":
        ds, schema = make_two_gaussians(seed=seed, **spec["synthetic"])
    else:
        schema = _load_schema(spec["schema"])
        ds = load_dataset(spec["dataset"], schema)
    train, val, test = split_dataset(ds, seed=seed)
    st = Standardizer.fit(train, schema)
    train, val, test = st.transform(train), st.transform(val), st.transform(test)
    schema = st.transform_schema(schema)
    cost = compute_cost_weights(compute_feature_stats(train), spec["cost_mode"])
    aset = ActionSet.from_schema(schema)
    data = TrainingData(train.rows, train.labels, val.rows, val.labels, schema, aset, cost)
    teacher = pretrain_teacher(train.rows, train.labels, tuple(spec["hidden"]), seed=seed,
                               epochs=spec["teacher_epochs"], lr=spec["teacher_lr"])
    return Task(data, test.rows, test.labels, test.groups, teacher)


def prepare_task(cfg: ExperimentConfig, seed: int) -> Task:
    """Split, standardize (train statistics only), weight costs and pretrain the fp teacher."""
    key = json.dumps({k: getattr(cfg, k) for k in ("dataset", "schema", "synthetic", "cost_mode",
                                                   "hidden", "teacher_epochs", "teacher_lr")},
                     sort_keys=True)
    return _prepare_cached(key, int(seed))


# ---------------------------------------------------------------------------
# single run

def quantize(cfg: ExperimentConfig, task: Task, seed: int, budget: float) -> tuple[ModelGraph, list, dict]:
    """Produce the deployed model for one (method, budget, seed) cell."""
    budget_bits = budget * cfg.reference_bits
    base = CfqConfig.from_dict({**cfg.train, "seed": seed, "budget_bits": budget_bits})
    teacher, data = task.teacher, task.data
    sizes = teacher.layer_sizes()
    info: dict = {}
    if cfg.method in ("lsq-uniform", "pact-uniform"):
        b = uniform_bits_for_budget(sizes, base.bits, budget_bits)
        model, log = baseline_train(teacher, data, cfg.method, base, bits=b)
    elif cfg.method in BASELINES:
        model, log = baseline_train(teacher, data, cfg.method, base)
    elif cfg.method == "cfq":
        model, log = train_cfq(teacher, data, base)
    elif cfg.method == "cfq-uniform":
        b = uniform_bits_for_budget(sizes, base.bits, budget_bits)
        model, log = train_cfq(teacher, data, replace(base, fixed_bits=(b,) * teacher.n_layers))
    else:
        n = len(data.x_train) if cfg.calib_size is None else min(cfg.calib_size, len(data.x_train))
        idx = np.random.default_rng(seed).permutation(len(data.x_train))[:n]
        solver = base.teacher_solver
        model, info = run_cfptq(teacher, data.x_train[idx], data.y_train[idx], data.schema, data.aset,
                                budget_bits, cfg.method, base.bits, solver, seed)
        log = []
    stats = getattr(model, "train_stats", None)
    if stats:
        info = {**info, "steps": stats["steps"], "quantized_forwards": stats["quantized_forwards"]}
    return model, log, info


def _run_name(label: str, budget: float, seed: int) -> str:
    return f"{label}_b{budget:g}_s{seed}".replace("+", "plus")


def execute_run(cfg_dict: dict, seed: int, budget: float, run_dir: str) -> dict:
    """Train/quantize, evaluate and persist one cell. Never raises; failures are recorded."""
    t_start = time.perf_counter()
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {"label": cfg_dict.get("label") or cfg_dict["method"], "method": cfg_dict["method"],
              "seed": seed, "budget": budget, "run_dir": out.name, "status": "ok", "error": None,
              "metrics": {}, "timing": {}}
    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        cell = {**cfg.to_dict(), "seeds": [seed], "budgets": [budget]}
        (out / "config.json").write_text(json.dumps(cell, sort_keys=True, indent=2), encoding="utf-8")
        t0 = time.perf_counter()
        task = prepare_task(cfg, seed)
        result["timing"]["prepare"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        model, log, info = quantize(cfg, task, seed, budget)
        result["timing"]["quantize"] = time.perf_counter() - t0
        stats = getattr(model, "train_stats", None)
        if stats:
            result["timing"].update({f"train_{k}": v for k, v in stats["timing"].items()})
            result["timing"]["train_steps"] = stats["steps"]
        with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out / "checkpoint.json").write_text(json.dumps(model.to_dict()), encoding="utf-8")
        t0 = time.perf_counter()
        x, y, groups = task.x_test, task.y_test, task.groups_test
        if cfg.eval_limit is not None:
            x, y = x[:cfg.eval_limit], y[:cfg.eval_limit]
            groups = None if groups is None else groups[:cfg.eval_limit]
        solver = SolverConfig(**{**DEFAULT_SOLVER, **cfg.solver, "seed": seed})
        metrics = {**DEFAULT_METRICS, **cfg.metrics}
        report, _ = stability_report(task.teacher, model, x, y, task.data.schema, task.data.aset,
                                     task.data.cost, solver, groups, rho=metrics["rho"],
                                     n_samples=metrics["n_samples"], seed=seed,
                                     with_epsilon=metrics["with_epsilon"])
        result["timing"]["evaluate"] = time.perf_counter() - t0
        n_params = sum(model.layer_sizes())
        report.extra = {"label": result["label"], "method": cfg.method, "seed": seed, "budget": budget,
                        "budget_bits": budget * cfg.reference_bits,
                        "normalized_cost": hard_bit_cost(model) / (cfg.reference_bits * n_params),
                        "val_accuracy": accuracy(model, task.data.x_val, task.data.y_val, "quantized"),
                        **{k: v for k, v in info.items() if k in ("bits", "variant", "steps",
                                                                   "quantized_forwards", "checksum",
                                                                   "n_counterfactual")}}
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        result["metrics"] = report_metrics(report.to_dict())
    except Exception as exc:  # recorded, the grid continues
        result["status"] = "failed"
        result["error"] = f"{type(exc).__name__}: {exc}"
        (out / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
    result["timing"]["total"] = time.perf_counter() - t_start
    return result


def report_metrics(rep: dict) -> dict:
    """Flat scalar metrics (value plus denominator) from a report dict."""
    m = {}
    for k in AGG_METRICS:
        m[k] = rep[k]["value"]
        m[f"{k}_denominator"] = rep[k]["denominator"]
    m["dirsim"] = rep["dirsim"]["value"]
    m["dirsim_denominator"] = rep["dirsim"]["denominator"]
    for k in ("accuracy_f", "accuracy_q", "bit_cost", "n_eval", "feasible_to_infeasible"):
        m[k] = rep.get(k)
    m["normalized_cost"] = rep.get("extra", {}).get("normalized_cost")
    if rep.get("risk"):
        m["risk_fraction"] = rep["risk"]["value"]
    return m


# ---------------------------------------------------------------------------
# grids

def _experiment_dir(out: str | Path, cfg: ExperimentConfig) -> Path:
    return Path(out) / f"{cfg.name}-{cfg.config_hash()[:12]}"


def run_experiment(cfg: ExperimentConfig, out: str | Path, workers: int = 1,
                   force: bool = False) -> tuple[RunRecord, Path]:
    """Run every (seed, budget) cell of ``cfg``; write the record and aggregate tables."""
    root = _experiment_dir(out, cfg)
    if (root / "record.json").exists() and not force:
        raise RunExistsError(f"{root} already holds results for config {cfg.config_hash()[:12]}; "
                             "pass --force to rerun")
    root.mkdir(parents=True, exist_ok=True)
    (root / "experiment.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2),
                                          encoding="utf-8")
    t0 = time.perf_counter()
    cells = [(cfg.to_dict(), s, b, str(root / "runs" / _run_name(cfg.row_label, b, s)))
             for b in cfg.budgets for s in cfg.seeds]
    results = _map_runs(cells, workers)
    record = RunRecord(cfg.config_hash(), version_string(), results, time.perf_counter() - t0)
    (root / "record.json").write_text(json.dumps(record.to_dict(), sort_keys=True, indent=2),
                                      encoding="utf-8")
    (root / "aggregate.csv").write_text(aggregate_csv(results), encoding="utf-8")
    if len(cfg.budgets) > 1:
        (root / "budget_curve.csv").write_text(budget_curve_csv(results), encoding="utf-8")
    return record, root


def _map_runs(cells: list, workers: int) -> list[dict]:
    if workers <= 1 or len(cells) <= 1:
        return [execute_run(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
        futures = [pool.submit(execute_run, *c) for c in cells]
        return [f.result() for f in futures]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return math.nan, math.nan
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(header: Sequence[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(header), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in header})
    return buf.getvalue()


def aggregate_rows(results: list[dict]) -> list[dict]:
    """Mean and sample std across seeds per (label, budget, metric)."""
    ok = [r for r in results if r["status"] == "ok"]
    keys = sorted({(r["label"], r["budget"]) for r in ok})
    rows = []
    for label, budget in keys:
        cell = [r["metrics"] for r in ok if r["label"] == label and r["budget"] == budget]
        for metric in AGG_METRICS + ("dirsim", "accuracy_f", "accuracy_q", "normalized_cost",
                                     "risk_fraction"):
            if metric not in cell[0]:
                continue
            mean, std = _mean_std([c[metric] for c in cell])
            den = [c.get(f"{metric}_denominator") for c in cell]
            rows.append({"label": label, "budget": budget, "metric": metric, "mean": mean, "std": std,
                         "median": _median([c[metric] for c in cell]), "n_seeds": len(cell),
                         "denominator": sum(d for d in den if d is not None) if any(
                             d is not None for d in den) else None})
    return rows


def _median(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan


AGG_HEADER = ("label", "budget", "metric", "mean", "std", "median", "n_seeds", "denominator")


def aggregate_csv(results: list[dict]) -> str:
    return _write_csv(AGG_HEADER, aggregate_rows(results))


CURVE_HEADER = ("label", "budget", "vd_median", "vd_mean", "vd_std", "crg_median", "accuracy_q_mean",
                "normalized_cost_mean", "n_seeds")


def budget_curve_rows(results: list[dict]) -> list[dict]:
    ok = [r for r in results if r["status"] == "ok"]
    rows = []
    for label, budget in sorted({(r["label"], r["budget"]) for r in ok}):
        cell = [r["metrics"] for r in ok if r["label"] == label and r["budget"] == budget]
        vd_mean, vd_std = _mean_std([c["vd"] for c in cell])
        rows.append({"label": label, "budget": budget, "vd_median": _median([c["vd"] for c in cell]),
                     "vd_mean": vd_mean, "vd_std": vd_std,
                     "crg_median": _median([c["crg"] for c in cell]),
                     "accuracy_q_mean": _mean_std([c["accuracy_q"] for c in cell])[0],
                     "normalized_cost_mean": _mean_std([c["normalized_cost"] for c in cell])[0],
                     "n_seeds": len(cell)})
    return rows


def budget_curve_csv(results: list[dict]) -> str:
    return _write_csv(CURVE_HEADER, budget_curve_rows(results))


def read_table(text: str) -> list[dict]:
    """Parse any harness CSV back into dicts with numeric fields as floats."""
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            if v == "":
                out[k] = None
                continue
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
        rows.append(out)
    return rows


def run_grid(configs: list[ExperimentConfig], out: str | Path, workers: int = 1,
             force: bool = False) -> tuple[list[dict], bool]:
    """Run several experiments; returns all run results and whether every run succeeded."""
    results, ok = [], True
    for cfg in configs:
        record, _ = run_experiment(cfg, out, workers, force)
        results.extend(record.runs)
        ok = ok and record.ok
    return results, ok


def budget_curve(base: ExperimentConfig, out: str | Path, methods: Sequence[str] = ("mixedprec-accuracy", "cfq"),
                 budgets: Sequence[float] = CURVE_BUDGETS, workers: int = 1,
                 force: bool = False) -> tuple[list[dict], bool, Path]:
    configs = [replace(base, method=m, label=None, budgets=list(budgets), name=f"{base.name}-{m}")
               for m in methods]
    results, ok = run_grid(configs, out, workers, force)
    path = Path(out) / f"{base.name}-budget_curve.csv"
    path.write_text(budget_curve_csv(results), encoding="utf-8")
    return results, ok, path


def ablation_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    """The five architecture ablations plus the teacher-noise grid."""
    base = replace(base, method="cfq", label=None)
    t = dict(base.train)

    def variant(label, method="cfq", **train):
        return replace(base, method=method, label=label, name=f"{base.name}-{label}",
                       train={**t, **train})

    out = [variant("cfq-full"),
           variant("cfq-eta0", eta=0.0),
           variant("cfq-uniform-bits", method="cfq-uniform"),
           variant("cfq-K1", teacher_steps=1),
           variant("cfq-K3", teacher_steps=3)]
    out += [variant(f"cfq-noise{s:g}", teacher_noise=s) for s in NOISE_GRID]
    return out


ABLATION_HEADER = ("label", "budget", "vd_mean", "vd_std", "vd_median", "crg_mean", "crg_std",
                   "accuracy_q_mean", "accuracy_q_std", "n_seeds")


def ablation_rows(results: list[dict]) -> list[dict]:
    ok = [r for r in results if r["status"] == "ok"]
    labels = list(dict.fromkeys(r["label"] for r in ok))
    rows = []
    for label in labels:
        for budget in sorted({r["budget"] for r in ok if r["label"] == label}):
            cell = [r["metrics"] for r in ok if r["label"] == label and r["budget"] == budget]
            row = {"label": label, "budget": budget, "n_seeds": len(cell),
                   "vd_median": _median([c["vd"] for c in cell])}
            for m in ("vd", "crg", "accuracy_q"):
                row[f"{m}_mean"], row[f"{m}_std"] = _mean_std([c[m] for c in cell])
            rows.append(row)
    return rows


def ablation_suite(base: ExperimentConfig, out: str | Path, workers: int = 1,
                   force: bool = False) -> tuple[list[dict], bool, Path]:
    results, ok = run_grid(ablation_configs(base), out, workers, force)
    path = Path(out) / f"{base.name}-ablation.csv"
    path.write_text(_write_csv(ABLATION_HEADER, ablation_rows(results)), encoding="utf-8")
    return results, ok, path


def collect_reports(root: str | Path) -> list[dict]:
    """Rebuild run results from the ``report.json`` files under ``root``."""
    results = []
    for p in sorted(Path(root).rglob("report.json")):
        rep = json.loads(p.read_text(encoding="utf-8"))
        extra = rep.get("extra", {})
        results.append({"label": extra.get("label", extra.get("method", p.parent.name)),
                        "method": extra.get("method"), "seed": extra.get("seed"),
                        "budget": extra.get("budget"), "status": "ok",
                        "metrics": report_metrics(rep), "run_dir": p.parent.name})
    return results
