"""Fake quantizers with straight-through gradients.

Weights use a signed symmetric grid with a learned step size (LSQ). Activations
are clipped to ``[0, alpha]`` with a learned threshold (PACT) and then passed
through an unsigned affine quantizer. Rounding is half-to-even.

Gradient contracts (surrogates, not the true derivatives):

* weights:  d w_hat / d w = 1 inside the clip range, 0 outside.
            d w_hat / d s = round(w/s) - w/s inside, q-/q+ outside.
* activations: d a_hat / d a = 1 on [0, alpha], 0 outside.
               d a_hat / d alpha = 1 where a > alpha, 0 elsewhere.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def int_bounds(b: int) -> tuple[int, int]:
    if int(b) != b or b < 2:
        raise ValueError(f"bitwidth must be an integer >= 2, got {b}")
    b = int(b)
    return -(2 ** (b - 1)), 2 ** (b - 1) - 1


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _check_positive(name: str, v) -> None:
    if isinstance(v, torch.Tensor):
        if bool((v.detach() <= 0).any()):
            raise ValueError(f"{name} must be > 0")
    elif not v > 0:
        raise ValueError(f"{name} must be > 0, got {v}")


def weight_codes(w, s, b: int):
    """Integer codes ``clip(round(w/s), q-, q+)`` (no gradient)."""
    _check_positive("step size", s)
    qn, qp = int_bounds(b)
    wt, to_np = _as_tensor(w)
    with torch.no_grad():
        codes = torch.clamp(torch.round(wt / s), qn, qp)
    return codes.numpy().astype(np.int64) if to_np else codes


def quantize_weights(w, s, b: int):
    """``s * clip(round(w/s), q-(b), q+(b))`` with the LSQ straight-through gradient.

    The forward value is computed exactly (no STE bookkeeping error), so the
    operator is idempotent bit-for-bit.
    """
    _check_positive("step size", s)
    qn, qp = int_bounds(b)
    wt, to_np = _as_tensor(w)
    v = wt / s
    s_val = s.detach() if isinstance(s, torch.Tensor) else s
    exact = torch.clamp(torch.round(v.detach()), qn, qp) * s_val
    if to_np:
        return exact.detach().numpy()
    # surrogate whose value is zero and whose gradient is the LSQ contract
    vc = torch.clamp(v, qn, qp)
    surrogate = (vc + (torch.round(vc) - vc).detach()) * s
    return exact + (surrogate - surrogate.detach())


def activation_codes(a, alpha, s, z, b: int):
    _check_positive("clip", alpha)
    _check_positive("step size", s)
    at, to_np = _as_tensor(a)
    with torch.no_grad():
        clipped = torch.minimum(torch.clamp(at, min=0.0), torch.as_tensor(alpha, dtype=at.dtype))
        codes = torch.clamp(torch.round(clipped / s) + z, 0, 2 ** int(b) - 1)
    return codes.numpy().astype(np.int64) if to_np else codes


def quantize_activations(a, alpha, s, z, b: int):
    """PACT clip to ``[0, alpha]`` followed by ``s * (clip(round(a/s) + z, 0, 2^b-1) - z)``."""
    _check_positive("clip", alpha)
    _check_positive("step size", s)
    at, to_np = _as_tensor(a)
    alpha_t = alpha if isinstance(alpha, torch.Tensor) else torch.as_tensor(float(alpha), dtype=at.dtype)
    with torch.no_grad():
        clipped = torch.minimum(torch.clamp(at, min=0.0), alpha_t)
        codes = torch.clamp(torch.round(clipped / s) + z, 0, 2 ** int(b) - 1)
        exact = s * (codes - z)
    if to_np:
        return exact.numpy()
    inside = ((at >= 0) & (at <= alpha_t)).to(at.dtype)
    above = (at > alpha_t).to(at.dtype)
    surrogate = at * inside + alpha_t * above
    return exact + (surrogate - surrogate.detach())


def lsq_init_step(w, b: int) -> float:
    """Standard LSQ initialization ``2 mean|w| / sqrt(q+)``."""
    _, qp = int_bounds(b)
    w = w.detach() if isinstance(w, torch.Tensor) else torch.as_tensor(np.asarray(w))
    step = float(2.0 * w.abs().mean() / np.sqrt(qp))
    return step if step > 0 else 1e-3


class QuantAttachment(nn.Module):
    """Bit-specific quantizer parameters for one layer.

    One weight step size, activation clip and activation zero-point per
    candidate bitwidth. The activation step is tied to the clip as
    ``alpha / (2^b - 1)``.
    """

    def __init__(self, bits, weight=None, quantize_weights: bool = True,
                 quantize_activations: bool = False):
        super().__init__()
        self.bits = tuple(int(b) for b in bits)
        if list(self.bits) != sorted(set(self.bits)):
            raise ValueError("candidate bits must be sorted and unique")
        for b in self.bits:
            int_bounds(b)
        steps = [lsq_init_step(weight, b) if weight is not None else 0.1 for b in self.bits]
        self.weight_step = nn.Parameter(torch.tensor(steps, dtype=torch.float64))
        self.act_clip = nn.Parameter(torch.full((len(self.bits),), 6.0, dtype=torch.float64))
        self.register_buffer("act_zero_point", torch.zeros(len(self.bits), dtype=torch.float64))
        self.quantize_weights = quantize_weights
        self.quantize_activations = quantize_activations

    def act_step(self, r: int) -> torch.Tensor:
        return self.act_clip[r].detach() / (2 ** self.bits[r] - 1)

    def init_act_clip(self, activations: torch.Tensor, q: float = 0.999) -> None:
        """Initialize every clip at the ``q`` quantile of calibration activations."""
        value = float(torch.quantile(activations.detach().flatten(), q))
        with torch.no_grad():
            self.act_clip.fill_(max(value, 1e-3))

    def clamp_(self, floor: float = 1e-8) -> None:
        with torch.no_grad():
            self.weight_step.clamp_(min=floor)
            self.act_clip.clamp_(min=floor)

    def qweight(self, w: torch.Tensor, r: int) -> torch.Tensor:
        if not self.quantize_weights:
            return w
        return quantize_weights(w, self.weight_step[r], self.bits[r])

    def qact(self, a: torch.Tensor, r: int) -> torch.Tensor:
        if not self.quantize_activations:
            return a
        return quantize_activations(a, self.act_clip[r], self.act_step(r),
                                    self.act_zero_point[r], self.bits[r])

    def to_dict(self) -> dict:
        return {
            "bits": list(self.bits),
            "weight_step": self.weight_step.detach().tolist(),
            "act_clip": self.act_clip.detach().tolist(),
            "act_zero_point": self.act_zero_point.tolist(),
            "quantize_weights": self.quantize_weights,
            "quantize_activations": self.quantize_activations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantAttachment":
        att = cls(d["bits"], None, d["quantize_weights"], d["quantize_activations"])
        with torch.no_grad():
            att.weight_step.copy_(torch.tensor(d["weight_step"], dtype=torch.float64))
            att.act_clip.copy_(torch.tensor(d["act_clip"], dtype=torch.float64))
            att.act_zero_point.copy_(torch.tensor(d["act_zero_point"], dtype=torch.float64))
        return att
