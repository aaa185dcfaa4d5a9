"""Command-line entry point: ``cfq <subcommand> [--config cfg.json] [--seed N] ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (CURVE_BUDGETS, DEFAULT_SOLVER, ExperimentConfig, RunExistsError, ablation_suite,
                      aggregate_csv, budget_curve, collect_reports, prepare_task, run_experiment)
from .metrics import stability_report
from .nn import ModelGraph, predict
from .recourse import SolverConfig, solve_recourse
from .train import CfqConfig, sweep_hyperparams

log = logging.getLogger("cfq")

METHOD_FOR = {"train-fp": "fp32", "cfq": "cfq"}


def _load_config(args, **overrides) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.budget is not None:
        d["budgets"] = [args.budget]
    return ExperimentConfig.from_dict(d)


def _report_outcome(ok: bool, where) -> int:
    print(f"{'all runs succeeded' if ok else 'some runs failed'}; results in {where}")
    return 0 if ok else 1


def cmd_experiment(args) -> int:
    method = METHOD_FOR.get(args.command)
    if args.command == "qat":
        method = args.method
    if args.command == "cfptq":
        method = args.variant
    overrides = {"method": method}
    if args.command == "cfptq" and args.calib_size is not None:
        overrides["calib_size"] = args.calib_size
    cfg = _load_config(args, **overrides)
    record, root = run_experiment(cfg, args.out, args.workers, args.force)
    for r in record.runs:
        status = "ok" if r["status"] == "ok" else f"FAILED ({r['error']})"
        vd = r["metrics"].get("vd")
        print(f"{r['label']} budget={r['budget']:g} seed={r['seed']}: {status}"
              + (f" vd={vd:.4f} acc={r['metrics']['accuracy_q']:.4f}" if vd is not None else ""))
    return _report_outcome(record.ok, root)


def cmd_budget_curve(args) -> int:
    cfg = _load_config(args)
    budgets = cfg.budgets if args.budget is not None else CURVE_BUDGETS
    _, ok, path = budget_curve(cfg, args.out, args.methods, budgets, args.workers, args.force)
    print(Path(path).read_text(encoding="utf-8"), end="")
    return _report_outcome(ok, path)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _, ok, path = ablation_suite(cfg, args.out, args.workers, args.force)
    print(Path(path).read_text(encoding="utf-8"), end="")
    return _report_outcome(ok, path)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.name}-sweep.csv"
    if path.exists() and not args.force:
        raise RunExistsError(f"{path} exists; pass --force to rerun")
    rows = []
    for seed in cfg.seeds:
        task = prepare_task(cfg, seed)
        base = CfqConfig.from_dict({**cfg.train, "seed": seed,
                                    "budget_bits": cfg.budgets[0] * cfg.reference_bits})
        res = sweep_hyperparams(task.teacher, task.data, base)
        for r in res.table:
            rows.append({"seed": seed, **r, "bits": " ".join(map(str, r["bits"])),
                         "selected": r["eta"] == res.best.eta and r["lam"] == res.best.lam})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def _solver(cfg: ExperimentConfig, seed: int) -> SolverConfig:
    return SolverConfig(**{**DEFAULT_SOLVER, **cfg.solver, "seed": seed})


def cmd_recourse(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        task = prepare_task(cfg, seed)
        model = ModelGraph.load(args.checkpoint) if args.checkpoint else task.teacher
        mode = "quantized" if model.attachments is not None else "fp"
        x = task.x_test if cfg.eval_limit is None else task.x_test[:cfg.eval_limit]
        y_tgt = task.data.schema.target_for(predict(model, x, mode))
        idx = np.nonzero(y_tgt >= 0)[0]
        res = solve_recourse(model, x[idx], y_tgt[idx], task.data.aset, _solver(cfg, seed), mode,
                             task.data.cost)
        path = out / f"{cfg.name}-recourse_s{seed}.csv"
        if path.exists() and not args.force:
            raise RunExistsError(f"{path} exists; pass --force to rerun")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            d = x.shape[1]
            w.writerow(["index", "target", "success", "cost", "margin"] + [f"delta_{j}" for j in range(d)])
            for i, j in enumerate(idx):
                w.writerow([int(j), int(y_tgt[j]), bool(res.feasible[i]), repr(float(res.cost[i])),
                            repr(float(res.margin[i]))] + [repr(float(v)) for v in res.delta[i]])
        print(f"seed {seed}: {int(res.feasible.sum())}/{len(idx)} successful; wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_q = ModelGraph.load(args.checkpoint)
    mode = "quantized" if model_q.attachments is not None else "fp"
    for seed in cfg.seeds:
        task = prepare_task(cfg, seed)
        x, y, g = task.x_test, task.y_test, task.groups_test
        if cfg.eval_limit is not None:
            x, y, g = x[:cfg.eval_limit], y[:cfg.eval_limit], None if g is None else g[:cfg.eval_limit]
        metrics = cfg.metrics
        report, _ = stability_report(task.teacher, model_q, x, y, task.data.schema, task.data.aset,
                                     task.data.cost, _solver(cfg, seed), g, mode,
                                     rho=metrics.get("rho", 0.05), n_samples=metrics.get("n_samples", 64),
                                     seed=seed, with_epsilon=metrics.get("with_epsilon", True))
        stem = out / f"{cfg.name}-evaluate_s{seed}"
        if stem.with_suffix(".json").exists() and not args.force:
            raise RunExistsError(f"{stem}.json exists; pass --force to rerun")
        stem.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
        stem.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        print(f"seed {seed}: vd={report.vd['value']} crg={report.crg['value']} -> {stem}.json")
    return 0


def cmd_report(args) -> int:
    results = collect_reports(args.run_dir)
    if not results:
        print(f"no report.json files under {args.run_dir}", file=sys.stderr)
        return 1
    text = aggregate_csv(results)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfq", description="Counterfactual-faithful quantization experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--budget", type=float, help="normalized budget in (0, 1]")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--force", action="store_true", help="rerun even if results exist")
        return sp

    common(sub.add_parser("train-fp", help="train and evaluate the full-precision model"))
    qat = common(sub.add_parser("qat", help="quantization-aware baseline"))
    qat.add_argument("--method", default="lsq-uniform",
                     choices=["lsq-uniform", "pact-uniform", "mixedprec-accuracy"])
    common(sub.add_parser("cfq", help="counterfactual-faithful quantization"))
    ptq = common(sub.add_parser("cfptq", help="post-training quantization variants"))
    ptq.add_argument("--variant", default="cfptq-cal+sens",
                     choices=["ptq-factual", "cfptq-cal", "cfptq-cal+sens"])
    ptq.add_argument("--calib-size", type=int)
    for name in ("recourse", "evaluate"):
        sp = common(sub.add_parser(name, help=f"{name} on the test split"))
        sp.add_argument("--checkpoint", required=name == "evaluate", help="model checkpoint JSON")
    common(sub.add_parser("sweep", help="eta/lambda grid"))
    common(sub.add_parser("ablate", help="ablation and teacher-noise grid"))
    bc = common(sub.add_parser("budget-curve", help="VD across normalized budgets"))
    bc.add_argument("--methods", nargs="+", default=["mixedprec-accuracy", "cfq"])
    rep = sub.add_parser("report", help="aggregate report.json files under a directory")
    rep.add_argument("run_dir")
    rep.add_argument("--out", help="write the aggregate CSV here")
    return p


HANDLERS = {"train-fp": cmd_experiment, "qat": cmd_experiment, "cfq": cmd_experiment,
            "cfptq": cmd_experiment, "recourse": cmd_recourse, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "ablate": cmd_ablate, "budget-curve": cmd_budget_curve,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except RunExistsError as exc:
        print(f"refusing to rerun: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
