"""Quantization-aware training that keeps teacher recourse points valid.

Per minibatch: targets from the schema rule, a detached K-step teacher action on
the frozen full-precision model, a Gumbel-Softmax bit sample with hard forward
choice, then task + validity (+ optional match/hinge) + budget penalty, all
updated together with straight-through gradients.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import CostSpec, DatasetSchema, action_cost
from .mixed import (DEFAULT_BITS, BudgetSpec, bit_cost, bops_cost, budget_penalty, effective_bits,
                    repair_to_budget, temperature_at)
from .nn import ModelGraph, accuracy, as_tensor, predict, target_margin, train_fp
from .recourse import ActionSet, SolverConfig, gradient_recourse, teacher_actions


@dataclass(frozen=True)
class CfqConfig:
    eta: float = 1.0
    lam: float = 1e-4
    alpha1: float = 0.0
    alpha2: float = 0.0
    beta: float = 0.0
    gamma: float = 0.25
    match_on: bool = False
    hinge_on: bool = False
    teacher_steps: int = 3
    teacher_step_size: float = 0.1
    teacher_noise: float = 0.0
    student_steps: int = 2
    student_step_size: float = 0.1
    budget_bits: float = 4.0
    budget_mode: str = "param-weighted"
    bits: tuple = DEFAULT_BITS
    fixed_bits: tuple | None = None
    quantize_activations: bool = False
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    lr_quant: float = 1e-3
    lr_policy: float = 0.05
    momentum: float = 0.9
    tau_start: float = 1.0
    tau_end: float = 0.1
    gumbel_noise: bool = True
    teacher_cache_epochs: int = 0
    validity_scope: str = "success"
    seed: int = 0

    def __post_init__(self):
        for name in ("eta", "lam", "alpha1", "alpha2", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.hinge_on and not self.gamma > 0:
            raise ValueError("gamma must be positive when the hinge is on")
        if self.validity_scope not in ("success", "all"):
            raise ValueError(f"unknown validity scope {self.validity_scope!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if self.fixed_bits is not None:
            object.__setattr__(self, "fixed_bits", tuple(int(b) for b in self.fixed_bits))
        SolverConfig.teacher(self.teacher_steps, self.teacher_step_size)

    @property
    def teacher_solver(self) -> SolverConfig:
        return SolverConfig.teacher(self.teacher_steps, self.teacher_step_size,
                                    teacher_noise=self.teacher_noise, seed=self.seed)

    @property
    def student_solver(self) -> SolverConfig:
        return SolverConfig.student(self.student_steps, self.student_step_size)

    def budget(self, layer_sizes: Sequence[int]) -> BudgetSpec:
        return BudgetSpec.average_bits(self.budget_bits, layer_sizes, lam=self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bits"] = list(self.bits)
        d["fixed_bits"] = None if self.fixed_bits is None else list(self.fixed_bits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CfqConfig":
        d = dict(d)
        d["bits"] = tuple(d.get("bits", DEFAULT_BITS))
        if d.get("fixed_bits") is not None:
            d["fixed_bits"] = tuple(d["fixed_bits"])
        return cls(**d)


@dataclass
class TrainingData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    schema: DatasetSchema
    aset: ActionSet
    cost: CostSpec

    def __post_init__(self):
        if len(self.x_train) == 0:
            raise ValueError("empty training split")


# ---------------------------------------------------------------------------
# loss terms

def validity_loss(model_q: ModelGraph, x, delta_fp, y_tgt, choices=None, logits=None) -> torch.Tensor:
    """Target cross-entropy of the quantized model at the teacher point.

    The teacher action enters as a constant; pass ``logits`` to reuse a forward.
    """
    if logits is None:
        logits = model_q(as_tensor(x) + as_tensor(delta_fp).detach(), "quantized", choices)
    y = torch.as_tensor(np.asarray(y_tgt), dtype=torch.long)
    if len(y) == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, y)


def match_loss(delta_q: torch.Tensor, delta_fp, cost: CostSpec, alpha1: float, alpha2: float,
               require_student_grad: bool = True) -> torch.Tensor:
    """``alpha1 |dq - dfp|_1 + alpha2 |c(dq) - c(dfp)|`` averaged over the batch."""
    delta_fp = as_tensor(delta_fp).detach()
    if delta_q.shape != delta_fp.shape:
        raise ValueError("student and teacher actions differ in shape")
    if require_student_grad and not delta_q.requires_grad:
        raise ValueError("student action is detached; the match term would carry no gradient")
    if delta_q.numel() == 0:
        return delta_q.sum() * 0.0
    l1 = (delta_q - delta_fp).abs().sum(-1)
    gap = (action_cost(delta_q, cost) - action_cost(delta_fp, cost)).abs()
    return (alpha1 * l1 + alpha2 * gap).mean()


def hinge_margin_loss(model_q: ModelGraph, x, delta_fp, y_tgt, gamma: float, choices=None,
                      logits=None) -> torch.Tensor:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if logits is None:
        logits = model_q(as_tensor(x) + as_tensor(delta_fp).detach(), "quantized", choices)
    y = np.asarray(y_tgt)
    if len(y) == 0:
        return logits.sum() * 0.0
    return torch.clamp(gamma - target_margin(logits, y), min=0.0).mean()


# ---------------------------------------------------------------------------
# training loop

class ForwardCounter:
    """Counts quantized-path forward calls made by the trainer."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self.count = 0

    def __call__(self, x, choices):
        self.count += 1
        return self.model(x, "quantized", choices)


def _prepare_model(teacher: ModelGraph, data: TrainingData, cfg: CfqConfig) -> ModelGraph:
    model = teacher.clone()
    model.attachments = model.policy = model.fixed_bits = None
    model.attach_quantizers(cfg.bits, cfg.quantize_activations, with_policy=cfg.fixed_bits is None)
    if cfg.fixed_bits is not None:
        if len(cfg.fixed_bits) != model.n_layers:
            raise ValueError("fixed_bits needs one entry per layer")
        if any(b not in cfg.bits for b in cfg.fixed_bits):
            raise ValueError("fixed bits must be among the candidate bits")
        model.fixed_bits = list(cfg.fixed_bits)
    if cfg.quantize_activations:
        with torch.no_grad():
            hidden = model.hidden_inputs(data.x_train)
        for layer in range(model.n_layers - 1):
            model.attachments[layer].init_act_clip(hidden[layer + 1])
    return model


def _relaxed_cost(model: ModelGraph, z, cfg: CfqConfig):
    sizes = model.layer_sizes()
    if z is None:
        b = model.deployed_bits()
        per_layer = [float(x) for x in b]
    else:
        per_layer = [effective_bits(z[layer], model.policy.bits) for layer in range(model.n_layers)]
    if cfg.budget_mode == "bops":
        act = per_layer if cfg.quantize_activations else [32.0] * len(per_layer)
        return bops_cost(per_layer, act, model.layer_macs())
    return bit_cost(per_layer, sizes)


def hard_bit_cost(model: ModelGraph) -> float:
    return bit_cost(model.deployed_bits(), model.layer_sizes())


def train_cfq(teacher: ModelGraph, data: TrainingData, cfg: CfqConfig,
              log_path: str | None = None) -> tuple[ModelGraph, list[dict]]:
    """Fine-tune a quantized copy of ``teacher``; returns it with a deployed bit list."""
    model = _prepare_model(teacher, data, cfg)
    sizes = model.layer_sizes()
    budget = cfg.budget(sizes)
    if cfg.budget_mode == "bops":
        act_bits = cfg.budget_bits if cfg.quantize_activations else 32.0
        budget = BudgetSpec(cfg.budget_bits * act_bits * sum(model.layer_macs()), "bops", cfg.lam)
    groups = [{"params": model.backbone_parameters(), "lr": cfg.lr}]
    if model.quantizer_parameters():
        groups.append({"params": model.quantizer_parameters(), "lr": cfg.lr_quant})
    if model.policy is not None:
        groups.append({"params": [model.policy.logits], "lr": cfg.lr_policy, "momentum": 0.0})
    opt = torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)
    batch_gen = torch.Generator().manual_seed(cfg.seed)
    gumbel_gen = torch.Generator().manual_seed(cfg.seed + 1)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 2)
    x = as_tensor(data.x_train)
    y = torch.as_tensor(np.asarray(data.y_train), dtype=torch.long)
    n = len(y)
    y_tgt_all = data.schema.target_for(predict(teacher, data.x_train))
    qforward = ForwardCounter(model)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    need_teacher = cfg.eta > 0 or cfg.hinge_on or cfg.match_on
    solver = cfg.teacher_solver
    cache: dict[str, torch.Tensor] = {}
    log: list[dict] = []
    timing = {"teacher": 0.0, "quantized": 0.0}
    step_seconds: list[float] = []
    step = 0
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            if cfg.teacher_cache_epochs > 0 and need_teacher and epoch % cfg.teacher_cache_epochs == 0:
                elig = np.nonzero(y_tgt_all >= 0)[0]
                cache["delta"] = torch.zeros_like(x)
                if len(elig):
                    cache["delta"][elig] = teacher_actions(teacher, data.x_train[elig], y_tgt_all[elig],
                                                           data.aset, solver, noise_gen)
            perm = torch.randperm(n, generator=batch_gen)
            sums: dict[str, float] = {}
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size].numpy()
                tau = temperature_at(step, total_steps, cfg.tau_start, cfg.tau_end)
                xb, yb = x[idx], y[idx]
                t0 = t_step = time.perf_counter()
                if need_teacher:
                    tgt = y_tgt_all[idx]
                    keep = np.nonzero(tgt >= 0)[0]
                    xe, te = xb[keep], tgt[keep]
                    if "delta" in cache:
                        dfp = cache["delta"][idx[keep]]
                    elif len(keep):
                        dfp = teacher_actions(teacher, xe, te, data.aset, solver, noise_gen)
                    else:
                        dfp = torch.zeros_like(xe)
                    if cfg.validity_scope == "success" and len(keep):
                        with torch.no_grad():
                            ok = (target_margin(teacher(xe + dfp), te) > solver.success_margin).numpy()
                        xe, te, dfp = xe[ok], te[ok], dfp[ok]
                    dfp = dfp.detach()
                timing["teacher"] += time.perf_counter() - t0
                t0 = time.perf_counter()
                if model.policy is not None:
                    z, picks = model.policy.sample(tau, gumbel_gen, noisy=cfg.gumbel_noise)
                else:
                    z, picks = None, None
                task = F.cross_entropy(qforward(xb, picks), yb)
                parts = {"task": task}
                if need_teacher:
                    logits_cf = qforward(xe + dfp, picks)
                    parts["valid"] = cfg.eta * validity_loss(model, xe, dfp, te, logits=logits_cf)
                    if cfg.hinge_on:
                        parts["hinge"] = cfg.beta * hinge_margin_loss(model, xe, dfp, te, cfg.gamma,
                                                                      logits=logits_cf)
                    if cfg.match_on:
                        dq = gradient_recourse(model, xe, te, data.aset, cfg.student_solver,
                                               "quantized", create_graph=True, choices=picks)
                        parts["match"] = match_loss(dq, dfp, data.cost, cfg.alpha1, cfg.alpha2)
                if z is not None:
                    parts["budget"] = cfg.lam * budget_penalty(_relaxed_cost(model, z, cfg), budget)
                loss = sum(parts.values())
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}: "
                        + ", ".join(f"{k}={float(v.detach())}" for k, v in parts.items()))
                opt.zero_grad()
                loss.backward()
                opt.step()
                for att in model.attachments:
                    att.clamp_()
                t1 = time.perf_counter()
                timing["quantized"] += t1 - t0
                step_seconds.append(t1 - t_step)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(idx)
                sums["total"] = sums.get("total", 0.0) + float(loss.detach()) * len(idx)
                step += 1
            record = {"epoch": epoch, "tau": temperature_at(max(step - 1, 0), total_steps,
                                                            cfg.tau_start, cfg.tau_end)}
            record.update({f"loss_{k}": v / n for k, v in sums.items()})
            record["bits"] = model.deployed_bits()
            record["hard_bit_cost"] = hard_bit_cost(model)
            record["val_accuracy"] = accuracy(model, data.x_val, data.y_val, "quantized")
            record["quantized_forwards"] = qforward.count
            log.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()
    if model.policy is not None:
        model.fixed_bits = repair_to_budget(model.policy, sizes, budget) \
            if cfg.budget_mode == "param-weighted" else model.policy.discretize()
    model.train_stats = {"steps": step, "quantized_forwards": qforward.count, "timing": timing,
                         "step_seconds": step_seconds}
    return model, log


# ---------------------------------------------------------------------------
# baselines and sweeps

BASELINES = ("fp32", "lsq-uniform", "pact-uniform", "mixedprec-accuracy")


def baseline_train(teacher: ModelGraph, data: TrainingData, mode: str, cfg: CfqConfig | None = None,
                   bits: int = 4) -> tuple[ModelGraph, list[dict]]:
    """Comparison baselines fine-tuned with the task loss only (same seeds and batches)."""
    cfg = replace(cfg or CfqConfig(), eta=0.0, match_on=False, hinge_on=False)
    n_layers = teacher.n_layers
    if mode == "fp32":
        model = teacher.clone()
        model.attachments = model.policy = None
        model.attach_quantizers((32,), with_policy=False)
        for att in model.attachments:
            att.quantize_weights = False
        model.fixed_bits = [32] * n_layers
        return model, []
    if mode == "lsq-uniform":
        return train_cfq(teacher, data, replace(cfg, fixed_bits=(bits,) * n_layers,
                                                bits=tuple(sorted(set(cfg.bits) | {bits}))))
    if mode == "pact-uniform":
        return train_cfq(teacher, data, replace(cfg, fixed_bits=(bits,) * n_layers,
                                                bits=tuple(sorted(set(cfg.bits) | {bits})),
                                                quantize_activations=True))
    if mode == "mixedprec-accuracy":
        from .ptq import CalibrationSet, allocate_bits_greedy, sensitivity_scores
        cal = CalibrationSet.factual(data.x_train, data.y_train)
        scores = sensitivity_scores(teacher, cal, "factual")
        sizes = teacher.layer_sizes()
        alloc = allocate_bits_greedy(scores.scores, sizes, cfg.bits, cfg.budget_bits * sum(sizes))
        return train_cfq(teacher, data, replace(cfg, fixed_bits=tuple(alloc)))
    raise ValueError(f"unknown baseline {mode!r}; expected one of {BASELINES}")


def uniform_bits_for_budget(layer_sizes: Sequence[int], bits: Sequence[int], budget_bits: float) -> int:
    """Largest candidate bit whose uniform assignment stays within the average budget."""
    ok = [b for b in bits if b <= budget_bits + 1e-12]
    if not ok:
        raise ValueError("budget is below the smallest candidate bit")
    return max(ok)


DEFAULT_ETAS = (0.25, 0.5, 1.0, 2.0)
DEFAULT_LAMS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class SweepResult:
    best: CfqConfig
    table: list[dict] = field(default_factory=list)
    met_budget: bool = True


def sweep_hyperparams(teacher: ModelGraph, data: TrainingData, base: CfqConfig | None = None,
                      etas: Sequence[float] = DEFAULT_ETAS, lams: Sequence[float] = DEFAULT_LAMS,
                      score_vd: Callable[[ModelGraph], float] | None = None) -> SweepResult:
    """Grid over (eta, lambda): best validation accuracy among within-budget runs,
    ties broken by lower validation VD."""
    base = base or CfqConfig()
    grid = [(e, l) for e in etas for l in lams]
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows = []
    for eta, lam in grid:
        cfg = replace(base, eta=eta, lam=lam)
        model, log = train_cfq(teacher, data, cfg)
        cost = hard_bit_cost(model)
        budget = cfg.budget(model.layer_sizes())
        rows.append({
            "eta": eta, "lam": lam,
            "val_accuracy": accuracy(model, data.x_val, data.y_val, "quantized"),
            "hard_bit_cost": cost, "budget": budget.total, "within_budget": budget.within(cost),
            "val_vd": float(score_vd(model)) if score_vd else math.nan,
            "bits": model.deployed_bits(),
        })
    feasible = [r for r in rows if r["within_budget"]]
    pool = feasible or rows

    def key(r):
        vd = r["val_vd"] if not math.isnan(r["val_vd"]) else math.inf
        return (-r["val_accuracy"], vd) if feasible else (r["hard_bit_cost"], -r["val_accuracy"], vd)

    best = min(pool, key=key)
    return SweepResult(replace(base, eta=best["eta"], lam=best["lam"]), rows, bool(feasible))


def pretrain_teacher(x, y, hidden: Sequence[int] = (32,), seed: int = 0, epochs: int = 30,
                     lr: float = 0.05) -> ModelGraph:
    """Full-precision reference model (also the frozen teacher)."""
    x = np.asarray(x)
    n_classes = int(np.max(y)) + 1
    model = ModelGraph([x.shape[1], *hidden, max(n_classes, 2)], seed=seed)
    train_fp(model, x, y, epochs=epochs, lr=lr, seed=seed)
    return model
