"""Training-free quantization guided by teacher counterfactual points.

Pipeline: calibration set (factual points, optionally plus ``x + delta_fp``) ->
per-layer sensitivity scores -> greedy bit allocation under the budget ->
per-layer step-size calibration by output reconstruction. Backbone weights are
never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.func import functional_call, grad, vmap
from torch.nn import functional as F

from .data import DatasetSchema
from .mixed import DEFAULT_BITS
from .nn import ModelGraph, as_tensor, predict, target_margin
from .quant import lsq_init_step, quantize_weights
from .recourse import ActionSet, SolverConfig, teacher_actions

FACTUAL, COUNTERFACTUAL = "factual", "counterfactual"
VARIANTS = ("ptq-factual", "cfptq-cal", "cfptq-cal+sens")


@dataclass
class CalibrationSet:
    points: np.ndarray
    labels: np.ndarray          # task label for factual points, target label for counterfactual ones
    provenance: np.ndarray      # FACTUAL / COUNTERFACTUAL per point
    source: np.ndarray          # index of the originating factual point

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("empty calibration set")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def factual(cls, x, y) -> "CalibrationSet":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.asarray(y, dtype=np.int64), np.full(len(x), FACTUAL), np.arange(len(x)))

    def select(self, tag: str) -> "CalibrationSet":
        m = self.provenance == tag
        return CalibrationSet(self.points[m], self.labels[m], self.provenance[m], self.source[m])

    @property
    def n_counterfactual(self) -> int:
        return int(np.sum(self.provenance == COUNTERFACTUAL))


def build_calibration_set(model_fp: ModelGraph, x, y, schema: DatasetSchema, aset: ActionSet,
                          solver: SolverConfig | None = None, mode: str = "augmented",
                          seed: int = 0) -> CalibrationSet:
    """Factual points, plus ``x + delta_fp`` for every successful teacher solve in augmented mode."""
    if mode not in ("factual", "augmented"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty calibration data")
    cal = CalibrationSet.factual(x, y)
    if mode == "factual":
        return cal
    solver = solver or SolverConfig.teacher()
    y_tgt = schema.target_for(predict(model_fp, x))
    elig = np.nonzero(y_tgt >= 0)[0]
    if len(elig) == 0:
        return cal
    gen = torch.Generator().manual_seed(seed)
    delta = teacher_actions(model_fp, x[elig], y_tgt[elig], aset, solver, gen).numpy()
    with torch.no_grad():
        m = target_margin(model_fp(as_tensor(x[elig] + delta)), y_tgt[elig]).numpy()
    ok = m > solver.success_margin
    cf = x[elig][ok] + delta[ok]
    return CalibrationSet(np.concatenate([x, cf]), np.concatenate([cal.labels, y_tgt[elig][ok]]),
                          np.concatenate([cal.provenance, np.full(len(cf), COUNTERFACTUAL)]),
                          np.concatenate([cal.source, elig[ok]]))


# ---------------------------------------------------------------------------
# calibration

def layer_mse(w: torch.Tensor, h: torch.Tensor, step: float, b: int) -> float:
    """Mean squared error between fp and quantized layer outputs on inputs ``h``."""
    with torch.no_grad():
        err = h @ (w - quantize_weights(w, torch.tensor(step, dtype=w.dtype), b)).T
        return float((err ** 2).mean())


def search_step(w: torch.Tensor, h: torch.Tensor, b: int, s0: float | None = None,
                grid: int = 81, iters: int = 40) -> tuple[float, float]:
    """Grid search of the step over ``[s0/8, 8 s0]`` (log-spaced), then golden-section
    refinement inside the bracket around the best grid point."""
    s0 = s0 or lsq_init_step(w, b)
    cands = s0 * np.exp(np.linspace(math.log(1 / 8), math.log(8), grid))
    losses = np.array([layer_mse(w, h, s, b) for s in cands])
    i = int(np.argmin(losses))
    best_s, best_l = float(cands[i]), float(losses[i])
    lo, hi = cands[max(i - 1, 0)], cands[min(i + 1, grid - 1)]
    g = (math.sqrt(5) - 1) / 2
    a, c = hi - g * (hi - lo), lo + g * (hi - lo)
    fa, fc = layer_mse(w, h, a, b), layer_mse(w, h, c, b)
    for _ in range(iters):
        if fa <= fc:
            hi, c, fc = c, a, fa
            a = hi - g * (hi - lo)
            fa = layer_mse(w, h, a, b)
        else:
            lo, a, fa = a, c, fc
            c = lo + g * (hi - lo)
            fc = layer_mse(w, h, c, b)
        for s, l in ((a, fa), (c, fc)):
            if l < best_l:
                best_s, best_l = float(s), l
    return best_s, best_l


def calibrate_quantizers(model: ModelGraph, cal: CalibrationSet, bits: Sequence[int]) -> list[float]:
    """Set each layer's step for its assigned bit by output-MSE minimization on the
    full-precision layer inputs over the calibration set. Returns the chosen steps."""
    if len(cal) == 0:
        raise ValueError("empty calibration set")
    if model.attachments is None:
        raise ValueError("attach quantizers before calibrating")
    with torch.no_grad():
        inputs = model.hidden_inputs(cal.points)
    steps = []
    for layer, b in enumerate(bits):
        att = model.attachments[layer]
        r = att.bits.index(int(b))
        w = model.weights[layer].detach()
        s, _ = search_step(w, inputs[layer], int(b))
        with torch.no_grad():
            att.weight_step[r] = s
        steps.append(s)
    return steps


# ---------------------------------------------------------------------------
# sensitivity and allocation

@dataclass
class SensitivityProfile:
    scores: np.ndarray
    mode: str


def per_example_weight_grad_l1(model: ModelGraph, x, y) -> np.ndarray:
    """(N, L) matrix of ``||d CE(f(x_i), y_i) / d W_l||_1``."""
    params = {f"weights.{i}": w.detach() for i, w in enumerate(model.weights)}
    params.update({f"biases.{i}": b.detach() for i, b in enumerate(model.biases)})
    names = [f"weights.{i}" for i in range(model.n_layers)]

    def loss(p, xi, yi):
        logits = functional_call(model, p, (xi[None],))
        return F.cross_entropy(logits, yi[None])

    g = vmap(grad(loss), in_dims=(None, 0, 0))(params, as_tensor(x), torch.as_tensor(np.asarray(y)))
    return np.stack([g[n].abs().flatten(1).sum(1).numpy() for n in names], axis=1)


def sensitivity_scores(model_fp: ModelGraph, cal: CalibrationSet, mode: str) -> SensitivityProfile:
    """Mean per-example weight-gradient l1 norm per layer.

    ``factual``: task loss at factual points; ``counterfactual``: target loss at
    the teacher counterfactual points.
    """
    tag = {"factual": FACTUAL, "counterfactual": COUNTERFACTUAL}.get(mode)
    if tag is None:
        raise ValueError(f"unknown sensitivity mode {mode!r}")
    sub = cal.provenance == tag
    if not sub.any():
        return SensitivityProfile(np.zeros(model_fp.n_layers), mode)
    g = per_example_weight_grad_l1(model_fp, cal.points[sub], cal.labels[sub])
    return SensitivityProfile(g.mean(axis=0), mode)


def allocate_bits_greedy(scores, layer_sizes: Sequence[int], bits: Sequence[int] = DEFAULT_BITS,
                         budget: float = math.inf) -> list[int]:
    """Start every layer at the lowest bit; repeatedly promote the layer with the
    largest score per parameter to its next candidate while the cost fits.

    Stops at the first promotion that does not fit, so a larger budget never
    lowers any layer's bits.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sizes = np.asarray(layer_sizes, dtype=np.float64)
    bits = sorted(int(b) for b in bits)
    if len(scores) != len(sizes):
        raise ValueError("one score per layer is required")
    floor = bits[0] * sizes.sum()
    if budget < floor:
        raise ValueError(f"budget {budget} is below the all-{bits[0]}-bit floor {floor}")
    level = np.zeros(len(sizes), dtype=int)
    cost = floor
    ratio = scores / sizes
    while True:
        open_ = np.nonzero(level < len(bits) - 1)[0]
        if len(open_) == 0:
            break
        # argmax returns the lowest layer index among equal ratios
        j = open_[int(np.argmax(ratio[open_]))]
        extra = (bits[level[j] + 1] - bits[level[j]]) * sizes[j]
        if cost + extra > budget:
            break
        level[j] += 1
        cost += extra
    return [bits[i] for i in level]


def run_cfptq(model_fp: ModelGraph, x_cal, y_cal, schema: DatasetSchema, aset: ActionSet,
              budget_bits: float = 4.0, variant: str = "cfptq-cal+sens", bits: Sequence[int] = DEFAULT_BITS,
              solver: SolverConfig | None = None, seed: int = 0) -> tuple[ModelGraph, dict]:
    """Quantized copy of ``model_fp``; the original model is left untouched."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    checksum = model_fp.backbone_checksum()
    cal = build_calibration_set(model_fp, x_cal, y_cal, schema, aset, solver,
                                "factual" if variant == "ptq-factual" else "augmented", seed)
    sens_mode = "counterfactual" if variant == "cfptq-cal+sens" and cal.n_counterfactual else "factual"
    profile = sensitivity_scores(model_fp, cal, sens_mode)
    sizes = model_fp.layer_sizes()
    alloc = allocate_bits_greedy(profile.scores, sizes, bits, budget_bits * sum(sizes))
    model_q = model_fp.clone()
    model_q.attachments = model_q.policy = None
    model_q.attach_quantizers(bits, with_policy=False)
    model_q.fixed_bits = alloc
    steps = calibrate_quantizers(model_q, cal, alloc)
    if model_fp.backbone_checksum() != checksum or model_q.backbone_checksum() != checksum:
        raise RuntimeError("backbone weights changed during post-training quantization")
    info = {"variant": variant, "bits": alloc, "steps": steps, "scores": profile.scores.tolist(),
            "score_mode": profile.mode, "n_factual": int(np.sum(cal.provenance == FACTUAL)),
            "n_counterfactual": cal.n_counterfactual, "checksum": checksum}
    return model_q, info
