"""Layer-wise bit selection: Gumbel-Softmax relaxation, hard forward choice, budgets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

DEFAULT_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class BudgetSpec:
    total: float
    mode: str = "param-weighted"
    lam: float = 0.0
    tolerance: float = 0.02

    def __post_init__(self):
        if not self.total > 0:
            raise ValueError("budget must be positive")
        if self.mode not in ("param-weighted", "bops"):
            raise ValueError(f"unknown accounting mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")

    @classmethod
    def average_bits(cls, bits: float, layer_sizes: Sequence[int], **kw) -> "BudgetSpec":
        return cls(float(bits) * float(sum(layer_sizes)), **kw)

    def within(self, cost: float) -> bool:
        return cost <= self.total * (1.0 + self.tolerance)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def sample_gumbel(shape, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    return -torch.log(-torch.log(u.clamp(1e-20, 1.0 - 1e-16)))


def gumbel_softmax_sample(logits, tau: float, noise=None) -> torch.Tensor:
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    logits = _t(logits)
    noise = torch.zeros_like(logits) if noise is None else _t(noise)
    return torch.softmax((logits + noise) / tau, dim=-1)


def select_bits_hard(z, bits: Sequence[int]) -> tuple[int, torch.Tensor]:
    """Hard bit for the forward pass plus a straight-through one-hot.

    The one-hot equals the hard choice exactly in value; its gradient flows into
    ``z``. Ties resolve to the lowest index (``torch.argmax`` returns the first
    maximal entry).
    """
    z = _t(z)
    r = int(torch.argmax(z.detach()))
    hard = torch.zeros_like(z)
    hard[r] = 1.0
    return int(bits[r]), hard + (z - z.detach())


def effective_bits(z, bits: Sequence[int]):
    z = _t(z)
    return (z * torch.as_tensor(bits, dtype=z.dtype)).sum(-1)


def bit_cost(per_layer_bits, layer_sizes: Sequence[int]):
    """``sum_l n_l * b_l``; accepts relaxed (tensor) or hard (int) bits."""
    if len(per_layer_bits) != len(layer_sizes):
        raise ValueError("one bitwidth per layer is required")
    if any(isinstance(b, torch.Tensor) for b in per_layer_bits):
        return sum(n * b for n, b in zip(layer_sizes, per_layer_bits))
    return float(sum(n * b for n, b in zip(layer_sizes, per_layer_bits)))


def bops_cost(weight_bits, act_bits, macs: Sequence[int]):
    if not len(weight_bits) == len(act_bits) == len(macs):
        raise ValueError("one weight/activation bitwidth per layer is required")
    return sum(m * bw * ba for m, bw, ba in zip(macs, weight_bits, act_bits))


def budget_penalty(cost, budget: BudgetSpec):
    if isinstance(cost, torch.Tensor):
        return torch.clamp(cost - budget.total, min=0.0)
    return max(0.0, float(cost) - budget.total)


class QuantPolicy(nn.Module):
    """Per-layer categorical logits over candidate bits."""

    def __init__(self, n_layers: int, bits: Sequence[int] = DEFAULT_BITS, init_logits=None):
        super().__init__()
        self.bits = tuple(int(b) for b in bits)
        if list(self.bits) != sorted(set(self.bits)):
            raise ValueError("candidate bits must be sorted ascending and unique")
        init = torch.zeros(n_layers, len(self.bits), dtype=torch.float64) if init_logits is None \
            else torch.as_tensor(init_logits, dtype=torch.float64).clone()
        self.logits = nn.Parameter(init)

    @property
    def n_layers(self) -> int:
        return self.logits.shape[0]

    def sample(self, tau: float, generator: torch.Generator | None = None, noisy: bool = True):
        """Relaxed samples ``z`` plus per-layer (index, straight-through one-hot)."""
        noise = sample_gumbel(self.logits.shape, generator) if noisy else None
        z = gumbel_softmax_sample(self.logits, tau, noise)
        picks = []
        for layer in range(self.n_layers):
            bit, onehot = select_bits_hard(z[layer], self.bits)
            picks.append((self.bits.index(bit), onehot))
        return z, picks

    def discretize(self) -> list[int]:
        return discretize_policy(self)

    def pin(self, per_layer_bits: Sequence[int], strength: float = 50.0) -> None:
        """Set logits so the argmax selects the given bits."""
        with torch.no_grad():
            self.logits.zero_()
            for layer, b in enumerate(per_layer_bits):
                self.logits[layer, self.bits.index(int(b))] = strength


def discretize_policy(policy: QuantPolicy) -> list[int]:
    idx = torch.argmax(policy.logits.detach(), dim=-1)
    return [policy.bits[int(i)] for i in idx]


def repair_to_budget(policy: QuantPolicy, layer_sizes: Sequence[int], budget: BudgetSpec) -> list[int]:
    """Demote layers until the hard cost is within tolerance of the budget.

    Each demotion moves one layer to its next lower candidate, choosing the layer
    whose logit gap to that candidate is smallest (least confident choice).
    """
    bits = discretize_policy(policy)
    logits = policy.logits.detach()
    idx = [policy.bits.index(b) for b in bits]
    while not budget.within(bit_cost([policy.bits[i] for i in idx], layer_sizes)):
        best, best_gap = None, math.inf
        for layer, r in enumerate(idx):
            if r == 0:
                continue
            gap = float(logits[layer, r] - logits[layer, r - 1])
            if gap < best_gap:
                best, best_gap = layer, gap
        if best is None:
            break
        idx[best] -= 1
    return [policy.bits[i] for i in idx]


def temperature_at(step: int, total_steps: int, start: float = 1.0, end: float = 0.1) -> float:
    """Exponential decay from ``start`` to ``end`` over ``total_steps``."""
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start * (end / start) ** frac
