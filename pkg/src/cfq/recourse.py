"""Constrained recourse: projection onto action sets, projected-gradient solvers
and a brute-force exact solver for linear models (used as a test oracle).

Two step rules are available:

``gradient``  the plain projected-gradient recursion
              ``delta <- P(delta - step * grad CE(x + delta, y_tgt))`` started at 0.
              Used for teacher and student actions during training.
``steepest``  normalized steepest descent of the same surrogate in the geometry
              of the recourse cost, with early stopping at the first successful
              point and bisection on the last segment. It approximates the
              minimum-cost action and is used for evaluation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import CostSpec, DatasetSchema, action_cost
from .nn import ModelGraph, as_tensor, target_margin

SUCCESS_MARGIN = 1e-6


@dataclass(frozen=True)
class ActionSet:
    """Schema-level constraint data; bound to an input ``x`` at projection time."""

    immutable: np.ndarray          # bool mask (d,)
    lower: np.ndarray
    upper: np.ndarray
    k: int | None = None
    onehot_groups: tuple[tuple[int, ...], ...] = ()
    ordinal_values: tuple[tuple[int, np.ndarray], ...] = ()

    @classmethod
    def from_schema(cls, schema: DatasetSchema) -> "ActionSet":
        imm = np.zeros(schema.dim, dtype=bool)
        imm[schema.immutable_indices] = True
        return cls(imm, schema.lower.copy(), schema.upper.copy(), schema.sparsity_k,
                   tuple(tuple(g) for g in schema.onehot_groups),
                   tuple(sorted(schema.ordinal_values.items())))

    @classmethod
    def box(cls, lower, upper, immutable=(), k=None) -> "ActionSet":
        lower = np.asarray(lower, dtype=np.float64)
        imm = np.zeros(len(lower), dtype=bool)
        imm[list(immutable)] = True
        return cls(imm, lower, np.asarray(upper, dtype=np.float64), k)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def units(self) -> list[list[int]]:
        """Sparsity units: each one-hot group counts once, other coordinates singly."""
        in_group = {j for g in self.onehot_groups for j in g}
        units = [[j] for j in range(self.dim) if j not in in_group]
        units += [list(g) for g in self.onehot_groups]
        return sorted(units, key=lambda u: u[0])

    def without_sparsity(self) -> "ActionSet":
        return replace(self, k=None)


def _project_torch(delta: torch.Tensor, x: torch.Tensor, aset: ActionSet, return_active: bool = False):
    d = delta.shape[-1]
    if d != aset.dim or x.shape[-1] != d:
        raise ValueError("dimension mismatch between action, input and action set")
    imm = torch.as_tensor(aset.immutable)
    lo = torch.as_tensor(aset.lower, dtype=delta.dtype)
    hi = torch.as_tensor(aset.upper, dtype=delta.dtype)
    out = torch.where(imm, torch.zeros_like(delta), delta)
    lo_d, hi_d = lo - x, hi - x
    clamped = (out < lo_d) | (out > hi_d)
    out = torch.minimum(torch.maximum(out, lo_d), hi_d)
    for j, values in aset.ordinal_values:
        vals = torch.as_tensor(values, dtype=delta.dtype)
        ok = (vals >= lo[j]) & (vals <= hi[j])
        vals = vals[ok] if bool(ok.any()) else vals
        target = x[..., j] + out[..., j]
        # ties resolve to the smaller domain value
        nearest = vals[torch.argmin((target[..., None] - vals).abs(), dim=-1)]
        out = out.clone()
        out[..., j] = torch.where(imm[j], out[..., j], nearest - x[..., j])
    for group in aset.onehot_groups:
        g = list(group)
        if bool(imm[g].all()):
            continue
        xn = x[..., g] + out[..., g]
        onehot = F.one_hot(torch.argmax(xn, dim=-1), len(g)).to(delta.dtype)
        out = out.clone()
        out[..., g] = onehot - x[..., g]
    active = ~imm & ~clamped
    if aset.k is not None:
        units = aset.units()
        mags = torch.stack([out[..., u].abs().amax(dim=-1) for u in units], dim=-1)
        # stable descending sort breaks ties toward the lowest unit index
        order = torch.sort(-mags, dim=-1, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(-1, order, torch.arange(len(units)).expand_as(order).contiguous())
        keep_unit = (rank < aset.k) & (mags > 0)
        keep = torch.zeros_like(out, dtype=torch.bool)
        for ui, u in enumerate(units):
            keep[..., u] = keep_unit[..., ui:ui + 1].expand(*keep.shape[:-1], len(u))
        out = torch.where(keep, out, torch.zeros_like(out))
        active = active & keep
    return (out, active) if return_active else out


def project(delta, x, aset: ActionSet):
    """Projection onto the action set of ``x``: immutables, box, categorical, top-k.

    Accepts single vectors or batches, numpy or torch (no gradient).
    """
    to_np = not isinstance(delta, torch.Tensor)
    dt = as_tensor(delta).detach()
    xt = as_tensor(x).detach()
    out = _project_torch(dt, xt, aset)
    return out.numpy() if to_np else out


def project_ste(delta: torch.Tensor, x: torch.Tensor, aset: ActionSet) -> torch.Tensor:
    """Exact projection forward; identity gradient on coordinates left active
    (actionable, not clamped, kept by the sparsity mask), zero elsewhere."""
    with torch.no_grad():
        proj, active = _project_torch(delta.detach(), x.detach(), aset, return_active=True)
    mask = active.to(delta.dtype)
    return proj + (delta * mask - (delta * mask).detach())


def is_feasible(delta, x, aset: ActionSet, atol: float = 1e-12) -> bool:
    """Coordinatewise check of every constraint family."""
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(delta[aset.immutable] != 0):
        return False
    xn = x + delta
    if np.any(xn < aset.lower - atol) or np.any(xn > aset.upper + atol):
        return False
    for j, values in aset.ordinal_values:
        if not aset.immutable[j] and np.min(np.abs(values - xn[j])) > atol:
            return False
    for g in aset.onehot_groups:
        v = xn[list(g)]
        if not (np.all((np.abs(v) <= atol) | (np.abs(v - 1) <= atol)) and abs(v.sum() - 1) <= atol):
            return False
    if aset.k is not None:
        changed = sum(bool(np.any(delta[u] != 0)) for u in aset.units())
        if changed > aset.k:
            return False
    return True


# ---------------------------------------------------------------------------
# solvers

@dataclass(frozen=True)
class SolverConfig:
    steps: int = 200
    step_size: float = 0.1
    restarts: int = 5
    surrogate: str = "ce"
    success_margin: float = SUCCESS_MARGIN
    target_margin: float | None = None
    stop_gradient: bool = True
    teacher_noise: float = 0.0
    rule: str = "steepest"
    early_stop: bool = True
    refine_iters: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("solver needs at least one step")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.rule not in ("gradient", "steepest"):
            raise ValueError(f"unknown step rule {self.rule!r}")
        if self.surrogate != "ce":
            raise ValueError("only the target cross-entropy surrogate is supported")
        if self.teacher_noise < 0:
            raise ValueError("teacher noise must be nonnegative")

    @property
    def stop_margin(self) -> float:
        """Margin the steepest solver aims for; success is still judged at ``success_margin``."""
        return self.success_margin if self.target_margin is None else max(self.success_margin,
                                                                          self.target_margin)

    @classmethod
    def teacher(cls, steps: int = 3, step_size: float = 0.1, **kw) -> "SolverConfig":
        return cls(steps=steps, step_size=step_size, restarts=1, rule="gradient",
                   early_stop=False, stop_gradient=True, **kw)

    @classmethod
    def student(cls, steps: int = 2, step_size: float = 0.1, **kw) -> "SolverConfig":
        return cls(steps=steps, step_size=step_size, restarts=1, rule="gradient",
                   early_stop=False, stop_gradient=False, **kw)

    @classmethod
    def evaluation(cls, **kw) -> "SolverConfig":
        return cls(**kw)


@dataclass
class RecourseResult:
    delta: np.ndarray
    label: int
    cost: float
    feasible: bool
    steps: int
    converged: bool
    margin: float = math.nan

    @property
    def success(self) -> bool:
        return self.feasible


@dataclass
class RecourseBatch:
    delta: np.ndarray
    label: np.ndarray
    cost: np.ndarray
    feasible: np.ndarray
    steps: np.ndarray
    converged: np.ndarray
    margin: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, i: int) -> RecourseResult:
        return RecourseResult(self.delta[i].copy(), int(self.label[i]), float(self.cost[i]),
                              bool(self.feasible[i]), int(self.steps[i]), bool(self.converged[i]),
                              float(self.margin[i]))


def _margins(model, u: torch.Tensor, y: torch.Tensor, mode: str) -> np.ndarray:
    with torch.no_grad():
        return target_margin(model(u, mode), y).numpy()


def _surrogate_grads(model, u: np.ndarray, y: torch.Tensor, mode: str):
    ut = torch.tensor(u, requires_grad=True)
    logits = model(ut, mode)
    m = target_margin(logits, y)
    ce = F.cross_entropy(logits, y, reduction="sum")
    g_ce, g_m = torch.autograd.grad(ce, ut, retain_graph=True)[0], torch.autograd.grad(m.sum(), ut)[0]
    return m.detach().numpy(), g_ce.numpy(), g_m.numpy()


def _labels(model, u, mode) -> np.ndarray:
    with torch.no_grad():
        return torch.argmax(model(as_tensor(u), mode), dim=-1).numpy()


def _prep(x, y_tgt, n_expected_dim):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y_tgt, dtype=np.int64), (len(x),)).copy()
    if x.shape[1] != n_expected_dim:
        raise ValueError("input dimension does not match the action set")
    return x, y


def gradient_recourse(model: ModelGraph, x, y_tgt, aset: ActionSet, cfg: SolverConfig,
                      mode: str = "fp", generator: torch.Generator | None = None,
                      create_graph: bool = False, choices=None) -> torch.Tensor:
    """K-step projected-gradient recursion from 0, returned as a tensor.

    With ``create_graph`` the unrolled steps stay differentiable with respect to
    the model parameters (student actions); otherwise the result is detached.
    """
    xt = as_tensor(x).detach()
    xt = xt if xt.ndim == 2 else xt[None]
    yt = torch.as_tensor(np.broadcast_to(np.asarray(y_tgt), (len(xt),)).copy(), dtype=torch.long)
    delta = torch.zeros_like(xt)
    for _ in range(cfg.steps):
        if not create_graph:
            delta = delta.detach().requires_grad_(True)
        elif not delta.requires_grad:
            delta = delta.requires_grad_(True)
        loss = F.cross_entropy(model(xt + delta, mode, choices), yt, reduction="sum")
        (grad,) = torch.autograd.grad(loss, delta, create_graph=create_graph)
        step = delta - cfg.step_size * grad
        delta = project_ste(step, xt, aset) if create_graph else project(step.detach(), xt, aset)
    if cfg.teacher_noise > 0:
        noise = torch.randn(delta.shape, generator=generator, dtype=delta.dtype)
        noisy = delta + cfg.teacher_noise * noise
        delta = project_ste(noisy, xt, aset) if create_graph else project(noisy.detach(), xt, aset)
    return delta if create_graph else delta.detach()


def _top_free(strategy, g_ce, g_m, weights, movable, room, k_free, rng):
    """Restrict a dense (l2) step to at most ``k_free`` new coordinates per row.

    Restarts differ in how the new support is ranked, which lets them escape a
    support whose box leaves too little room to reach the target.
    """
    if strategy == 0:
        score = np.abs(g_ce) / weights
    elif strategy == 1:
        score = np.abs(g_m) * room
    elif strategy == 2:
        score = np.abs(g_m) * room / weights
    else:
        score = np.abs(g_ce) / weights * np.exp(0.5 * rng.normal(size=g_ce.shape))
    n_new, support = k_free
    score = np.where(movable & ~support, score, -np.inf)
    order = np.argsort(-score, axis=1, kind="stable")
    ranks = np.argsort(order, axis=1, kind="stable")
    return support | (ranks < n_new[:, None])


def _steepest_direction(strategy, g_ce, g_m, need, weights, movable, room, p, rng, step,
                        k_free=None):
    """One step of normalized steepest descent per row (returns additive update)."""
    n, d = g_ce.shape
    sign = -np.sign(g_ce)
    upd = np.zeros((n, d))
    if p == 2:
        if k_free is not None:
            movable = movable & _top_free(strategy, g_ce, g_m, weights, movable, room, k_free, rng)
        direction = np.where(movable, sign * np.abs(g_ce) / weights ** 2, 0.0)
        if strategy > 0:
            direction = direction * np.exp(0.3 * rng.normal(size=direction.shape))
        norm = np.linalg.norm(direction * weights, axis=1, keepdims=True)
        ok = norm[:, 0] > 0
        upd[ok] = step * direction[ok] / norm[ok]
        return np.where(movable, np.clip(upd, -room, room) * (upd != 0), 0.0)
    ratio = np.where(movable, np.abs(g_ce) / weights, -np.inf)
    capacity = np.where(movable, np.abs(g_m) * room, -np.inf)
    if strategy == 0:
        score = ratio
    elif strategy == 1:
        completes = movable & (capacity >= need[:, None])
        score = np.where(completes.any(axis=1, keepdims=True),
                         np.where(completes, ratio, -np.inf), ratio)
    elif strategy == 2:
        score = capacity
    else:
        score = np.where(movable, ratio * np.exp(0.5 * rng.normal(size=ratio.shape)), -np.inf)
    has = np.isfinite(score).any(axis=1) & (np.where(movable, np.abs(g_ce), 0).max(axis=1) > 0)
    rows = np.nonzero(has)[0]
    cols = np.argmax(score[rows], axis=1)
    amount = np.minimum(step / weights[cols], room[rows, cols])
    upd[rows, cols] = sign[rows, cols] * amount
    return upd


def _steepest_single_restart(model, x, y, aset, cfg, cost, mode, strategy, rng):
    n, d = x.shape
    yt = torch.as_tensor(y, dtype=torch.long)
    weights = cost.weights
    lo_d = aset.lower - x
    hi_d = aset.upper - x
    latent = np.zeros((n, d))
    delta = project(latent, x, aset)
    margin = _margins(model, as_tensor(x + delta), yt, mode)
    done = margin > cfg.stop_margin
    success = done.copy()
    steps = np.zeros(n, dtype=np.int64)
    converged = done.copy()
    units = aset.units()
    for t in range(cfg.steps):
        act = np.nonzero(~done)[0]
        if len(act) == 0:
            break
        xa, la = x[act], latent[act]
        m, g_ce, g_m = _surrogate_grads(model, xa + delta[act], yt[act], mode)
        sign = -np.sign(g_ce)
        room = np.where(sign > 0, hi_d[act] - la, la - lo_d[act])
        movable = (~aset.immutable)[None, :] & (room > 1e-12) & (g_ce != 0)
        k_free = None
        if aset.k is not None:
            changed = np.stack([np.any(delta[act][:, u] != 0, axis=1) for u in units], axis=1)
            full = changed.sum(axis=1) >= aset.k
            in_support = np.zeros((len(act), d), dtype=bool)
            for ui, u in enumerate(units):
                in_support[:, u] |= changed[:, ui:ui + 1]
            movable &= ~full[:, None] | in_support
            k_free = (np.maximum(aset.k - changed.sum(axis=1), 0), in_support)
        need = cfg.stop_margin - m
        upd = _steepest_direction(strategy, g_ce, g_m, need, weights, movable, room, cost.p,
                                  rng, cfg.step_size, k_free)
        stalled = ~np.any(upd != 0, axis=1)
        new_latent = np.clip(la + upd, lo_d[act], hi_d[act])
        new_delta = project(new_latent, xa, aset)
        new_margin = _margins(model, as_tensor(xa + new_delta), yt[act], mode)
        hit = new_margin > cfg.stop_margin
        if cfg.early_stop and hit.any() and cfg.refine_iters > 0:
            h = np.nonzero(hit)[0]
            lo_t, hi_t = np.zeros(len(h)), np.ones(len(h))
            a, b = la[h], new_latent[h]
            for _ in range(cfg.refine_iters):
                mid = 0.5 * (lo_t + hi_t)
                cand = project(a + mid[:, None] * (b - a), xa[h], aset)
                ok = _margins(model, as_tensor(xa[h] + cand), yt[act][h], mode) > cfg.stop_margin
                hi_t = np.where(ok, mid, hi_t)
                lo_t = np.where(ok, lo_t, mid)
            new_latent[h] = a + hi_t[:, None] * (b - a)
            new_delta[h] = project(new_latent[h], xa[h], aset)
        latent[act] = new_latent
        delta[act] = new_delta
        steps[act] = t + 1
        margin[act] = new_margin
        if cfg.early_stop:
            success[act] = hit
            done[act] = hit | stalled
            converged[act] = hit | stalled
        else:
            success[act] = hit
            done[act] = stalled
    margin = _margins(model, as_tensor(x + delta), yt, mode)
    return delta, margin, steps, converged


def _gradient_batch(model, x, y, aset, cfg, mode, restart, rng):
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + restart)
    delta = gradient_recourse(model, x, y, aset, cfg, mode, generator=gen).numpy()
    margin = _margins(model, as_tensor(x + delta), torch.as_tensor(y), mode)
    steps = np.full(len(x), cfg.steps)
    return delta, margin, steps, np.zeros(len(x), dtype=bool)


def solve_recourse(model: ModelGraph, x, y_tgt, aset: ActionSet, cfg: SolverConfig | None = None,
                   mode: str = "fp", cost: CostSpec | None = None) -> RecourseBatch:
    """Batched recourse; keeps the cheapest successful action over restarts."""
    cfg = cfg or SolverConfig()
    x, y = _prep(x, y_tgt, aset.dim)
    cost = cost or CostSpec.uniform(aset.dim)
    n, d = x.shape
    rng = np.random.default_rng(cfg.seed)
    best = np.zeros((n, d))
    best_key = np.full((n, 2), np.inf)
    best_ok = np.zeros(n, dtype=bool)
    best_steps = np.zeros(n, dtype=np.int64)
    best_conv = np.zeros(n, dtype=bool)
    first = None
    for r in range(cfg.restarts):
        if cfg.rule == "steepest":
            delta, m, steps, conv = _steepest_single_restart(model, x, y, aset, cfg, cost, mode, r, rng)
        else:
            delta, m, steps, conv = _gradient_batch(model, x, y, aset, cfg, mode, r, rng)
        if first is None:
            first = (delta, steps, conv)
        ok = m > cfg.success_margin
        # prefer actions reaching the stop margin, then the cheapest
        key = np.stack([np.where(m > cfg.stop_margin, 0.0, 1.0), action_cost(delta, cost)], axis=1)
        better = ok & ((key[:, 0] < best_key[:, 0]) |
                       ((key[:, 0] == best_key[:, 0]) & (key[:, 1] < best_key[:, 1])))
        best[better], best_key[better] = delta[better], key[better]
        best_ok |= ok
        best_steps[better], best_conv[better] = steps[better], conv[better]
    fail = ~best_ok
    best[fail], best_steps[fail], best_conv[fail] = first[0][fail], first[1][fail], first[2][fail]
    yt = torch.as_tensor(y, dtype=torch.long)
    margin = _margins(model, as_tensor(x + best), yt, mode)
    return RecourseBatch(best, _labels(model, x + best, mode), action_cost(best, cost),
                         best_ok & (margin > cfg.success_margin), best_steps, best_conv, margin)


def pgd_recourse(model: ModelGraph, x, y_tgt: int, aset: ActionSet, cfg: SolverConfig | None = None,
                 mode: str = "fp", cost: CostSpec | None = None) -> RecourseResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("pgd_recourse takes a single input; use solve_recourse for batches")
    return solve_recourse(model, x[None], [y_tgt], aset, cfg, mode, cost)[0]


def teacher_actions(model: ModelGraph, x, y_tgt, aset: ActionSet, cfg: SolverConfig,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Detached K-step teacher actions on the full-precision path."""
    if cfg.rule == "gradient":
        return gradient_recourse(model, x, y_tgt, aset, cfg, "fp", generator=generator)
    res = solve_recourse(model, x, y_tgt, aset, cfg, "fp")
    delta = torch.as_tensor(res.delta)
    if cfg.teacher_noise > 0:
        noise = torch.randn(delta.shape, generator=generator, dtype=delta.dtype)
        delta = project(delta + cfg.teacher_noise * noise, as_tensor(x), aset)
    return delta


# ---------------------------------------------------------------------------
# exact linear oracle

def exact_linear_recourse(w, b0: float, x, aset: ActionSet, cost: CostSpec | None = None,
                          margin: float = SUCCESS_MARGIN, resolution: int = 41, refine_rounds: int = 4,
                          max_dim: int = 8, max_points: int = 5_000_000) -> RecourseResult:
    """Minimum-cost action for the halfspace ``w.(x+delta) + b0 > margin`` by grid enumeration.

    Every support of at most ``k`` actionable coordinates is enumerated; each
    support coordinate ranges over a uniform grid of its box (always including
    0 and both endpoints), followed by zoomed re-gridding around the incumbent.
    Categorical constraints are not supported. Intended as a test oracle.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = len(w)
    if d > max_dim:
        raise ValueError(f"oracle limited to d <= {max_dim}, got {d}")
    if aset.onehot_groups or aset.ordinal_values:
        raise ValueError("oracle supports continuous features only")
    cost = cost or CostSpec.uniform(d)
    lo = np.maximum(aset.lower - x, -1e6)
    hi = np.minimum(aset.upper - x, 1e6)
    if float(w @ x + b0) > margin:
        return RecourseResult(np.zeros(d), 1, 0.0, True, 0, True, float(w @ x + b0))
    free = [j for j in range(d) if not aset.immutable[j] and hi[j] - lo[j] > 0]
    kmax = len(free) if aset.k is None else min(aset.k, len(free))
    best_delta, best_cost = None, math.inf
    for size in range(1, kmax + 1):
        for support in itertools.combinations(free, size):
            s = list(support)
            if resolution ** size > max_points:
                raise ValueError("grid too large for the oracle; lower the resolution")
            centre = None
            width = hi[s] - lo[s]
            for rnd in range(refine_rounds + 1):
                if centre is None:
                    axes = [np.union1d(np.linspace(lo[j], hi[j], resolution), [0.0]) for j in s]
                else:
                    axes = [np.union1d(np.clip(np.linspace(c - h, c + h, resolution), lo[j], hi[j]),
                                       [0.0] if lo[j] <= 0 <= hi[j] else [])
                            for j, c, h in zip(s, centre, width)]
                grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, size)
                full = np.zeros((len(grid), d))
                full[:, s] = grid
                ok = full @ w + (w @ x + b0) > margin
                if not ok.any():
                    break
                costs = action_cost(full[ok], cost)
                i = int(np.argmin(costs))
                if costs[i] < best_cost:
                    best_cost, best_delta = float(costs[i]), full[ok][i].copy()
                centre = grid[ok][i]
                spacing = (2.0 * width if rnd else hi[s] - lo[s]) / (resolution - 1)
                width = 2.0 * spacing
    if best_delta is None:
        return RecourseResult(np.zeros(d), 0, 0.0, False, 0, True, float(w @ x + b0))
    return RecourseResult(best_delta, 1, best_cost, True, 0, True, float(w @ (x + best_delta) + b0))
