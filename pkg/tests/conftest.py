import numpy as np
import pytest
import torch

from cfq.nn import ModelGraph


def linear_model(w, b0=0.0) -> ModelGraph:
    """Two-logit model whose target margin for class 1 is ``w.x + b0``."""
    w = np.asarray(w, dtype=np.float64)
    model = ModelGraph([len(w), 2], seed=0)
    with torch.no_grad():
        model.weights[0].copy_(torch.tensor(np.stack([np.zeros_like(w), w])))
        model.biases[0].copy_(torch.tensor([0.0, float(b0)]))
    return model


def central_diff(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_action_instance(rng: np.random.Generator):
    """Random (x, delta, ActionSet) with continuous, ordinal and one-hot coordinates.

    ``x`` itself is feasible; ``delta`` is arbitrary.
    """
    from cfq.recourse import ActionSet

    n_cont = int(rng.integers(1, 5))
    n_ord = int(rng.integers(0, 3))
    group_sizes = [int(s) for s in rng.integers(2, 4, size=int(rng.integers(0, 3)))]
    d = n_cont + n_ord + sum(group_sizes)
    lower = np.full(d, -np.inf)
    upper = np.full(d, np.inf)
    x = np.zeros(d)
    lower[:n_cont] = rng.uniform(-3, -0.5, n_cont)
    upper[:n_cont] = rng.uniform(0.5, 3, n_cont)
    x[:n_cont] = rng.uniform(lower[:n_cont], upper[:n_cont])
    ordinal = []
    for j in range(n_cont, n_cont + n_ord):
        values = np.sort(rng.choice(np.arange(-4, 5), size=int(rng.integers(2, 6)), replace=False)).astype(float)
        lower[j], upper[j] = values[0], values[-1]
        x[j] = rng.choice(values)
        ordinal.append((j, values))
    groups = []
    start = n_cont + n_ord
    for size in group_sizes:
        g = tuple(range(start, start + size))
        lower[list(g)], upper[list(g)] = 0.0, 1.0
        x[g[int(rng.integers(size))]] = 1.0
        groups.append(g)
        start += size
    imm = rng.random(d) < 0.2
    for g in groups:   # a group is immutable as a whole or not at all
        imm[list(g)] = imm[g[0]]
    n_units = n_cont + n_ord + len(groups)
    k = None if rng.random() < 0.3 else int(rng.integers(1, n_units + 1))
    aset = ActionSet(imm, lower, upper, k, tuple(groups), tuple(ordinal))
    delta = rng.normal(scale=rng.choice([0.1, 1.0, 5.0]), size=d)
    return x, delta, aset


def small_task(seed: int = 0, n: int = 400, d: int = 4, hidden=(8,), epochs: int = 10):
    """Tiny standardized two-Gaussian task with a pretrained teacher (fast unit tests)."""
    from cfq.data import (Standardizer, compute_cost_weights, compute_feature_stats, make_two_gaussians,
                          split_dataset)
    from cfq.recourse import ActionSet
    from cfq.train import TrainingData, pretrain_teacher

    ds, schema = make_two_gaussians(n=n, d=d, seed=seed)
    tr, va, te = split_dataset(ds, seed=seed)
    st_ = Standardizer.fit(tr, schema)
    tr, va, te = st_.transform(tr), st_.transform(va), st_.transform(te)
    schema = st_.transform_schema(schema)
    cost = compute_cost_weights(compute_feature_stats(tr))
    data = TrainingData(tr.rows, tr.labels, va.rows, va.labels, schema, ActionSet.from_schema(schema), cost)
    teacher = pretrain_teacher(tr.rows, tr.labels, hidden, seed=seed, epochs=epochs)
    return data, te, teacher


def brute_force_metrics(records: list[dict], weights, p: int = 1, eps: float = 1e-8, tau: float = 1e-3) -> dict:
    """Independent per-record loop over raw records: VD, CRG, DirSim, ActOverlap."""
    import math

    def cost(d):
        if p == 1:
            return sum(abs(w * v) for w, v in zip(weights, d))
        return math.sqrt(sum((w * v) ** 2 for w, v in zip(weights, d)))

    vd_num = vd_den = 0
    crg_sum, dir_sum, ov_sum = 0.0, 0.0, 0.0
    n_both = n_dir = 0
    for r in records:
        if r["feasible_f"]:
            vd_den += 1
            vd_num += r["label_q"] != r["y_tgt"]
        if r["feasible_f"] and r["feasible_q"]:
            n_both += 1
            cf, cq = cost(r["delta_f"]), cost(r["delta_q"])
            crg_sum += (cq - cf) / (cf + eps)
            nf = math.sqrt(sum(v * v for v in r["delta_f"]))
            nq = math.sqrt(sum(v * v for v in r["delta_q"]))
            if nf > 1e-12 and nq > 1e-12:
                n_dir += 1
                dir_sum += sum(a * b for a, b in zip(r["delta_f"], r["delta_q"])) / (nf * nq + eps)
            sf = {j for j, v in enumerate(r["delta_f"]) if abs(v) > tau}
            sq = {j for j, v in enumerate(r["delta_q"]) if abs(v) > tau}
            ov_sum += len(sf & sq) / len(sf | sq) if sf | sq else 1.0
    nan = float("nan")
    return {"vd": vd_num / vd_den if vd_den else nan, "crg": crg_sum / n_both if n_both else nan,
            "dirsim": dir_sum / n_dir if n_dir else nan, "act_overlap": ov_sum / n_both if n_both else nan}


ACCEPTANCE_LINES: list[str] = []


def verdict(name: str, ok: bool, detail: str = "") -> None:
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
