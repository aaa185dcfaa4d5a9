import json
import math
import statistics
from dataclasses import replace

import pytest

from cfq.cli import main
from cfq.harness import (CURVE_BUDGETS, ExperimentConfig, RunExistsError, ablation_configs, aggregate_rows,
                         budget_curve, read_table, run_experiment)
from cfq.metrics import read_report_csv

TINY = dict(synthetic={"n": 300, "d": 4, "separation": 2.5}, hidden=[8], teacher_epochs=5,
            train={"epochs": 1}, solver={"steps": 50, "restarts": 1}, eval_limit=40,
            metrics={"n_samples": 4, "rho": 0.05, "with_epsilon": True})


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, "seeds": [0], **kw})


def test_config_hash_is_canonical():
    a, b = tiny(), tiny()
    assert a.config_hash() == b.config_hash()
    assert tiny(seeds=[1]).config_hash() != a.config_hash()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(a.to_dict()))).config_hash() == a.config_hash()


def test_config_validation():
    for bad in ({"seeds": []}, {"budgets": [0.0]}, {"budgets": [1.5]}, {"method": "magic"},
                {"train": {"eta": -1}}, {"solver": {"steps": 0}}, {"colour": "red"}):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({**TINY, **bad})


def test_run_layout_rerun_guard_and_determinism(tmp_path):
    cfg = tiny()
    record, root = run_experiment(cfg, tmp_path / "a")
    assert record.ok
    run = root / "runs" / "cfq_b0.5_s0"
    for name in ("config.json", "log.jsonl", "checkpoint.json", "report.json", "report.csv"):
        assert (run / name).exists(), name
    with pytest.raises(RunExistsError):
        run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "a", force=True)
    _, root_b = run_experiment(cfg, tmp_path / "b")
    assert (run / "report.json").read_bytes() == (root_b / "runs" / "cfq_b0.5_s0" / "report.json").read_bytes()
    rows = read_report_csv((run / "report.csv").read_text())
    assert all(r["denominator"] != "" for r in rows if r["metric"] in ("vd", "crg", "dirsim"))


def test_aggregate_mean_and_std_over_seeds(tmp_path):
    record, root = run_experiment(tiny(seeds=[0, 1], method="mixedprec-accuracy"), tmp_path)
    vds = [r["metrics"]["vd"] for r in record.runs]
    row = next(r for r in aggregate_rows(record.runs) if r["metric"] == "vd")
    assert row["n_seeds"] == 2
    assert row["mean"] == pytest.approx(statistics.fmean(vds))
    assert row["std"] == pytest.approx(statistics.stdev(vds))
    assert row["denominator"] == sum(r["metrics"]["vd_denominator"] for r in record.runs)
    table = read_table((root / "aggregate.csv").read_text())
    again = next(r for r in table if r["metric"] == "vd")
    assert again["mean"] == row["mean"] and again["denominator"] == row["denominator"]


def test_budget_curve_csv_covers_every_budget(tmp_path):
    results, ok, path = budget_curve(tiny(), tmp_path, methods=["cfq"], budgets=CURVE_BUDGETS)
    assert ok
    rows = read_table(path.read_text())
    assert [r["budget"] for r in rows] == list(CURVE_BUDGETS)
    costs = [r["normalized_cost_mean"] for r in rows]
    assert all(c <= b * 1.02 for c, b in zip(costs, CURVE_BUDGETS))


def test_ablation_grid_controls_one_variable():
    cfgs = {c.row_label: c for c in ablation_configs(tiny())}
    assert {"cfq-full", "cfq-eta0", "cfq-uniform-bits", "cfq-K1", "cfq-K3"} <= set(cfgs)
    assert sum(1 for k in cfgs if k.startswith("cfq-noise")) == 4
    k1, k3 = cfgs["cfq-K1"].to_dict(), cfgs["cfq-K3"].to_dict()
    diff = {k for k in k1 if k1[k] != k3[k]}
    assert diff == {"train", "label", "name"}
    assert {k for k in k1["train"] if k1["train"].get(k) != k3["train"].get(k)} == {"teacher_steps"}


def test_noise_free_row_equals_clean_row(tmp_path):
    cfgs = {c.row_label: c for c in ablation_configs(tiny())}
    a, _ = run_experiment(cfgs["cfq-full"], tmp_path)
    b, _ = run_experiment(cfgs["cfq-noise0"], tmp_path)
    assert a.runs[0]["metrics"] == b.runs[0]["metrics"]


def test_failures_are_recorded_and_grid_continues(tmp_path):
    cfg = tiny(dataset=str(tmp_path / "missing.csv"), schema="adult", seeds=[0, 1])
    record, _ = run_experiment(cfg, tmp_path)
    assert not record.ok
    assert [r["status"] for r in record.runs] == ["failed", "failed"]
    assert "FileNotFoundError" in record.runs[0]["error"]


def test_csv_dataset_runs(tmp_path):
    import csv
    import numpy as np
    rng = np.random.default_rng(0)
    schema = {"features": [{"name": "a", "kind": "continuous", "lower": -9, "upper": 9},
                           {"name": "b", "kind": "continuous", "lower": -9, "upper": 9},
                           {"name": "c", "kind": "categorical", "categories": ["u", "v", "w"]}],
              "label": "y", "immutable": [], "sparsity_k": 2, "favorable": {"mode": "fixed", "class": 1}}
    (tmp_path / "s.json").write_text(json.dumps(schema))
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "c", "y"])
        for _ in range(200):
            a, b = rng.normal(size=2)
            w.writerow([f"{a:.4f}", f"{b:.4f}", rng.choice(["u", "v", "w"]), int(a + b > 0)])
    cfg = tiny(dataset=str(tmp_path / "d.csv"), schema=str(tmp_path / "s.json"))
    record, _ = run_experiment(cfg, tmp_path / "out")
    assert record.ok, record.runs[0]["error"]


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    out = str(tmp_path / "runs")
    assert main(["cfq", "--config", str(cfg_path), "--seed", "0", "--out", out]) == 0
    assert main(["cfq", "--config", str(cfg_path), "--seed", "0", "--out", out]) == 2
    assert main(["cfptq", "--config", str(cfg_path), "--seed", "0", "--out", out,
                 "--variant", "cfptq-cal", "--calib-size", "50"]) == 0
    assert main(["qat", "--config", str(cfg_path), "--seed", "0", "--budget", "0.25", "--out", out]) == 0
    assert main(["train-fp", "--config", str(cfg_path), "--seed", "0", "--out", out]) == 0
    ckpt = next((tmp_path / "runs").glob("experiment-*/runs/cfq_b0.5_s0/checkpoint.json"))
    assert main(["evaluate", "--config", str(cfg_path), "--seed", "0", "--out", out, "--checkpoint", str(ckpt)]) == 0
    assert main(["recourse", "--config", str(cfg_path), "--seed", "0", "--out", out]) == 0
    agg = tmp_path / "agg.csv"
    assert main(["report", out, "--out", str(agg)]) == 0
    labels = {r["label"] for r in read_table(agg.read_text())}
    assert {"cfq", "cfptq-cal", "lsq-uniform", "fp32"} <= labels
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "dataset": str(tmp_path / "nope.csv"), "schema": "adult"}))
    assert main(["cfq", "--config", str(bad), "--seed", "0", "--out", out]) == 1
    capsys.readouterr()


def test_parallel_workers_match_sequential(tmp_path):
    cfg = tiny(seeds=[0, 1])
    seq, _ = run_experiment(cfg, tmp_path / "seq")
    par, _ = run_experiment(cfg, tmp_path / "par", workers=2)
    assert [r["metrics"]["vd"] for r in seq.runs] == [r["metrics"]["vd"] for r in par.runs]
    assert all(not math.isnan(r["metrics"]["accuracy_q"]) for r in par.runs)
