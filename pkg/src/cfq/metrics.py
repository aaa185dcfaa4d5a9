"""Recourse-stability metrics for a (full-precision, quantized) model pair and
margin-based diagnostics.

Every ratio is returned together with its denominator; an empty denominator
gives ``nan`` rather than an error so reports can still be written.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import CostSpec, DatasetSchema
from .nn import ModelGraph, as_tensor, predict, target_margin
from .recourse import ActionSet, SolverConfig, solve_recourse

EPS = 1e-8
TAU_SUPP = 1e-3
RHO = 0.05
N_SAMPLES = 64


@dataclass
class PairedRecourse:
    """Per-example records of recourse solved on both models with one solver."""

    x: np.ndarray
    y_tgt: np.ndarray
    delta_f: np.ndarray
    delta_q: np.ndarray
    cost_f: np.ndarray
    cost_q: np.ndarray
    feasible_f: np.ndarray
    feasible_q: np.ndarray
    label_f_at_f: np.ndarray      # f(x + delta_f)
    label_q_at_f: np.ndarray      # f_q(x + delta_f)
    margin_f_at_f: np.ndarray
    groups: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y_tgt)

    def subset(self, mask) -> "PairedRecourse":
        mask = np.asarray(mask)
        kw = {k: (v[mask] if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return PairedRecourse(**kw)

    def to_records(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            out.append({
                "index": i, "y_tgt": int(self.y_tgt[i]),
                "delta_f": self.delta_f[i].tolist(), "delta_q": self.delta_q[i].tolist(),
                "cost_f": float(self.cost_f[i]), "cost_q": float(self.cost_q[i]),
                "feasible_f": bool(self.feasible_f[i]), "feasible_q": bool(self.feasible_q[i]),
                "label_fp": int(self.label_f_at_f[i]), "label_q": int(self.label_q_at_f[i]),
                "group": None if self.groups is None else str(self.groups[i]),
            })
        return out


def evaluate_pair(model_f: ModelGraph, model_q: ModelGraph, x, schema: DatasetSchema, aset: ActionSet,
                  cost: CostSpec, solver: SolverConfig | None = None, groups=None,
                  q_mode: str = "quantized") -> PairedRecourse:
    """Solve recourse on both models for every point predicted unfavorable by ``f``."""
    solver = solver or SolverConfig.evaluation()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_tgt = schema.target_for(predict(model_f, x))
    keep = y_tgt >= 0
    x, y_tgt = x[keep], y_tgt[keep]
    groups = None if groups is None else np.asarray(groups)[keep]
    if len(x) == 0:
        d = aset.dim
        empty = np.zeros(0)
        return PairedRecourse(np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros((0, d)),
                              np.zeros((0, d)), empty, empty, empty.astype(bool), empty.astype(bool),
                              np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), empty, groups)
    rf = solve_recourse(model_f, x, y_tgt, aset, solver, "fp", cost)
    rq = solve_recourse(model_q, x, y_tgt, aset, solver, q_mode, cost)
    with torch.no_grad():
        lf = model_f(as_tensor(x + rf.delta), "fp")
        lq = model_q(as_tensor(x + rf.delta), q_mode)
    return PairedRecourse(x, y_tgt, rf.delta, rq.delta, rf.cost, rq.cost, rf.feasible, rq.feasible,
                          torch.argmax(lf, -1).numpy(), torch.argmax(lq, -1).numpy(),
                          target_margin(lf, y_tgt).numpy(), groups)


@dataclass
class Ratio:
    value: float
    numerator: float
    denominator: int

    def as_dict(self) -> dict:
        return {"value": self.value, "numerator": self.numerator, "denominator": self.denominator}


def _ratio(num: float, den: int) -> Ratio:
    return Ratio(float(num) / den if den else math.nan, float(num), int(den))


def validity_drop(pairs: PairedRecourse, variant: str = "target") -> Ratio:
    """Share of successful fp recourse points that the quantized model does not honour.

    ``target``: f_q(x + delta_f) != y_tgt. ``mismatch``: f_q(x + delta_f) != f(x + delta_f).
    """
    ok = pairs.feasible_f
    if variant == "target":
        fail = pairs.label_q_at_f != pairs.y_tgt
    elif variant == "mismatch":
        fail = pairs.label_q_at_f != pairs.label_f_at_f
    else:
        raise ValueError(f"unknown VD variant {variant!r}")
    return _ratio(np.sum(fail & ok), int(np.sum(ok)))


def recourse_gap(pairs: PairedRecourse, eps: float = EPS) -> Ratio:
    both = pairs.feasible_f & pairs.feasible_q
    rel = (pairs.cost_q[both] - pairs.cost_f[both]) / (pairs.cost_f[both] + eps)
    return _ratio(float(np.sum(rel)), int(np.sum(both)))


def _cosines(a: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + eps)


def direction_similarity(pairs: PairedRecourse, eps: float = EPS, degenerate_tol: float = 1e-12) -> dict:
    both = pairs.feasible_f & pairs.feasible_q
    nf = np.linalg.norm(pairs.delta_f, axis=-1)
    nq = np.linalg.norm(pairs.delta_q, axis=-1)
    degenerate = both & ((nf <= degenerate_tol) | (nq <= degenerate_tol))
    use = both & ~degenerate
    cos = _cosines(pairs.delta_f[use], pairs.delta_q[use], eps)
    r = _ratio(float(np.sum(cos)), int(np.sum(use)))
    return {**r.as_dict(), "degenerate": int(np.sum(degenerate))}


def support(delta: np.ndarray, tau: float = TAU_SUPP) -> np.ndarray:
    return np.abs(delta) > tau


def action_overlap(pairs: PairedRecourse, tau_supp: float = TAU_SUPP, eps: float = EPS) -> Ratio:
    both = pairs.feasible_f & pairs.feasible_q
    sf, sq = support(pairs.delta_f[both], tau_supp), support(pairs.delta_q[both], tau_supp)
    inter = np.sum(sf & sq, axis=-1)
    union = np.sum(sf | sq, axis=-1)
    # two empty supports agree perfectly
    jac = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return _ratio(float(np.sum(jac)), int(np.sum(both)))


def feasible_recourse_rate(model: ModelGraph, x, schema: DatasetSchema, aset: ActionSet,
                           solver: SolverConfig | None = None, mode: str = "fp",
                           cost: CostSpec | None = None) -> Ratio:
    """Share of unfavorable-predicted points for which the solver finds a successful action."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_tgt = schema.target_for(predict(model, x, mode))
    keep = y_tgt >= 0
    if not keep.any():
        return _ratio(0, 0)
    res = solve_recourse(model, x[keep], y_tgt[keep], aset, solver or SolverConfig.evaluation(), mode, cost)
    return _ratio(int(np.sum(res.feasible)), int(np.sum(keep)))


def subgroup_slices(pairs: PairedRecourse, groups=None, eps: float = EPS) -> dict:
    groups = pairs.groups if groups is None else np.asarray(groups)
    if groups is None:
        raise ValueError("no subgroup ids available")
    out = {}
    for g in sorted({str(v) for v in groups}):
        sub = pairs.subset(np.asarray([str(v) == g for v in groups]))
        out[g] = {"vd": validity_drop(sub).as_dict(), "crg": recourse_gap(sub, eps).as_dict()}
    vds = [s["vd"]["value"] for s in out.values() if not math.isnan(s["vd"]["value"])]
    crgs = [s["crg"]["value"] for s in out.values() if not math.isnan(s["crg"]["value"])]
    summary = {
        "max_vd": max(vds) if vds else math.nan,
        "delta_vd": max(vds) - min(vds) if vds else math.nan,
        "max_crg": max(crgs) if crgs else math.nan,
        "delta_crg": max(crgs) - min(crgs) if crgs else math.nan,
    }
    return {"groups": out, "summary": summary}


# ---------------------------------------------------------------------------
# margin diagnostics

def _logit_gap(model_f, model_q, u, q_mode):
    with torch.no_grad():
        return (model_q(as_tensor(u), q_mode) - model_f(as_tensor(u), "fp")).abs().amax(-1).numpy()


def epsilon_monte_carlo(model_f: ModelGraph, model_q: ModelGraph, points, rho: float = RHO,
                        n_samples: int = N_SAMPLES, seed: int = 0, q_mode: str = "quantized",
                        quantile: float = 0.95) -> dict:
    """Per-point max over ``n_samples`` draws in the l2 ball of radius ``rho`` of
    ``||g_q(u) - g(u)||_inf``; the centre itself is always included.

    Samples are drawn as a fixed stream per point, so a larger ``n_samples`` with
    the same seed evaluates a superset of points.
    """
    if rho < 0 or n_samples < 1:
        raise ValueError("need rho >= 0 and at least one sample")
    u = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = u.shape
    eps_hat = _logit_gap(model_f, model_q, u, q_mode)
    m = max(n_samples - 1, 0)
    # one direction stream and one radius stream per point: prefixes are stable in n_samples
    dirs = np.stack([np.random.default_rng([seed, i, 0]).normal(size=(m, d)) for i in range(n)]) \
        if n else np.zeros((0, m, d))
    radii = np.stack([np.random.default_rng([seed, i, 1]).random(m) for i in range(n)]) ** (1.0 / d) \
        if n else np.zeros((0, m))
    for j in range(n_samples - 1):
        v = dirs[:, j]
        v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        eps_hat = np.maximum(eps_hat, _logit_gap(model_f, model_q, u + rho * radii[:, j:j + 1] * v, q_mode))
    return {"per_point": eps_hat, "quantile": float(np.quantile(eps_hat, quantile)) if n else math.nan,
            "max": float(np.max(eps_hat)) if n else math.nan}


def epsilon_first_order(model_f: ModelGraph, model_q: ModelGraph, point, rho: float = RHO,
                        q_mode: str = "quantized") -> float:
    """``||g_q(u) - g(u)||_inf + rho * ||J(u)||_{2->inf}`` with J the input Jacobian of g_q - g.

    The l2-to-linf operator norm is the largest row l2 norm of J, computed exactly
    from one input gradient per class.
    """
    u = as_tensor(np.asarray(point, dtype=np.float64)).clone().requires_grad_(True)
    diff = model_q(u, q_mode) - model_f(u, "fp")
    bias = float(diff.detach().abs().max())
    if rho == 0:
        return bias
    rows = [torch.autograd.grad(diff[c], u, retain_graph=True)[0] for c in range(diff.shape[-1])]
    op = max(float(torch.linalg.vector_norm(r)) for r in rows)
    return bias + rho * op


def risk_fraction(margins, epsilons) -> Ratio:
    m = np.asarray(margins, dtype=np.float64)
    e = np.asarray(epsilons, dtype=np.float64)
    if m.shape != e.shape:
        raise ValueError("margins and epsilons must align")
    return _ratio(int(np.sum(m <= 2 * e)), len(m))


def margin_distribution(model: ModelGraph, points, y_tgt, mode: str = "fp") -> dict:
    with torch.no_grad():
        m = target_margin(model(as_tensor(points), mode), np.asarray(y_tgt)).numpy()
    m = np.sort(m)
    cdf = np.arange(1, len(m) + 1) / max(len(m), 1)
    return {"margin": m, "cdf": cdf}


def margin_cdf_csv(dist: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["margin", "cdf"])
    for m, c in zip(dist["margin"], dist["cdf"]):
        w.writerow([repr(float(m)), repr(float(c))])
    return buf.getvalue()


def transfer_certified(margin_f: float, eps: float) -> bool:
    """Sufficient condition for the quantized model to keep the target class."""
    return margin_f > 2 * eps


# ---------------------------------------------------------------------------
# report

@dataclass
class StabilityReport:
    vd: dict
    vd_mismatch: dict
    crg: dict
    dirsim: dict
    act_overlap: dict
    frr_f: dict
    frr_q: dict
    n_eval: int
    feasible_to_infeasible: int
    infeasible_to_feasible: int
    both_infeasible: int
    accuracy_f: float = math.nan
    accuracy_q: float = math.nan
    subgroups: dict | None = None
    epsilon: dict | None = None
    risk: dict | None = None
    bits: list | None = None
    bit_cost: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def rows(self) -> list[dict]:
        """Flat rows: metric, slice, value, numerator, denominator."""
        out = []
        for name in ("vd", "vd_mismatch", "crg", "dirsim", "act_overlap", "frr_f", "frr_q"):
            r = getattr(self, name)
            out.append({"metric": name, "slice": "all", "value": r["value"],
                        "numerator": r["numerator"], "denominator": r["denominator"]})
        if self.subgroups:
            for g, s in self.subgroups["groups"].items():
                for name in ("vd", "crg"):
                    r = s[name]
                    out.append({"metric": name, "slice": f"group={g}", "value": r["value"],
                                "numerator": r["numerator"], "denominator": r["denominator"]})
            for k, v in self.subgroups["summary"].items():
                out.append({"metric": k, "slice": "groups", "value": v, "numerator": "",
                            "denominator": len(self.subgroups["groups"])})
        if self.risk:
            out.append({"metric": "risk_fraction", "slice": "all", **self.risk})
        for k in ("accuracy_f", "accuracy_q"):
            out.append({"metric": k, "slice": "all", "value": getattr(self, k), "numerator": "",
                        "denominator": ""})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["metric", "slice", "value", "numerator", "denominator"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def read_report_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = dict(r)
        for k in ("value", "numerator", "denominator"):
            try:
                out[k] = float(out[k]) if out[k] != "" else ""
            except ValueError:
                pass
        rows.append(out)
    return rows


def stability_report(model_f: ModelGraph, model_q: ModelGraph, x, y, schema: DatasetSchema,
                     aset: ActionSet, cost: CostSpec, solver: SolverConfig | None = None,
                     groups=None, q_mode: str = "quantized", rho: float = RHO,
                     n_samples: int = N_SAMPLES, seed: int = 0, with_epsilon: bool = True) -> tuple[
                         StabilityReport, PairedRecourse]:
    pairs = evaluate_pair(model_f, model_q, x, schema, aset, cost, solver, groups, q_mode)
    ff, fq = pairs.feasible_f, pairs.feasible_q
    n = len(pairs)
    frr_f = _ratio(int(np.sum(ff)), n).as_dict()
    frr_q = _ratio(int(np.sum(fq)), n).as_dict()
    report = StabilityReport(
        vd=validity_drop(pairs).as_dict(),
        vd_mismatch=validity_drop(pairs, "mismatch").as_dict(),
        crg=recourse_gap(pairs).as_dict(),
        dirsim=direction_similarity(pairs),
        act_overlap=action_overlap(pairs).as_dict(),
        frr_f=frr_f, frr_q=frr_q, n_eval=n,
        feasible_to_infeasible=int(np.sum(ff & ~fq)),
        infeasible_to_feasible=int(np.sum(~ff & fq)),
        both_infeasible=int(np.sum(~ff & ~fq)),
        accuracy_f=float(np.mean(predict(model_f, x) == np.asarray(y))),
        accuracy_q=float(np.mean(predict(model_q, x, q_mode) == np.asarray(y))),
    )
    if pairs.groups is not None and n:
        report.subgroups = subgroup_slices(pairs)
    if with_epsilon and np.any(ff):
        u = pairs.x[ff] + pairs.delta_f[ff]
        est = epsilon_monte_carlo(model_f, model_q, u, rho, n_samples, seed, q_mode)
        report.epsilon = {"quantile_95": est["quantile"], "max": est["max"], "rho": rho,
                          "n_samples": n_samples}
        report.risk = risk_fraction(pairs.margin_f_at_f[ff], est["per_point"]).as_dict()
    if model_q.attachments is not None:
        report.bits = model_q.deployed_bits()
        report.bit_cost = float(sum(n * b for n, b in zip(model_q.layer_sizes(), report.bits)))
    return report, pairs


def worst_case_logits(logits, y_tgt: int, eps: float) -> np.ndarray:
    """Logit vector within ``eps`` (sup norm) of ``logits`` with the smallest target margin:
    the target drops by ``eps`` and every competitor rises by ``eps``."""
    z = np.asarray(logits, dtype=np.float64) + eps
    z[..., int(y_tgt)] -= 2 * eps
    return z
