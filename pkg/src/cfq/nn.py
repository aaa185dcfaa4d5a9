"""Feed-forward classifiers (affine + ReLU) with optional fake-quantized forward."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .mixed import QuantPolicy
from .quant import QuantAttachment


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class ModelGraph(nn.Module):
    """MLP with ``len(dims) - 1`` affine layers; ReLU between layers, logits out.

    Logistic regression is the single-layer case. Quantizers are attached per
    layer; the quantized forward picks, per layer, one candidate-bit index.
    """

    def __init__(self, dims: Sequence[int], seed: int | None = 0):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        self.dims = tuple(int(d) for d in dims)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for n_in, n_out in zip(self.dims[:-1], self.dims[1:]):
            bound = 1.0 / np.sqrt(n_in)
            w = (torch.rand(n_out, n_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(n_out, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))
        self.attachments: nn.ModuleList | None = None
        self.policy: QuantPolicy | None = None
        self.fixed_bits: list[int] | None = None

    # -- structure ------------------------------------------------------
    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def layer_sizes(self) -> list[int]:
        """Quantized parameter count per layer (weight entries; biases stay fp)."""
        return [w.numel() for w in self.weights]

    def layer_macs(self) -> list[int]:
        return [w.shape[0] * w.shape[1] for w in self.weights]

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.weights) + list(self.biases)

    def quantizer_parameters(self) -> list[nn.Parameter]:
        return [] if self.attachments is None else list(self.attachments.parameters())

    def attach_quantizers(self, bits: Sequence[int], quantize_activations: bool = False,
                          with_policy: bool = True) -> None:
        self.attachments = nn.ModuleList(
            QuantAttachment(bits, w, True, quantize_activations) for w in self.weights)
        self.policy = QuantPolicy(self.n_layers, bits) if with_policy else None
        self.fixed_bits = None

    def deployed_bits(self) -> list[int]:
        if self.fixed_bits is not None:
            return list(self.fixed_bits)
        if self.policy is not None:
            return self.policy.discretize()
        raise ValueError("no bit assignment: set fixed_bits or attach a policy")

    def candidate_bits(self) -> tuple[int, ...]:
        if self.attachments is None:
            raise ValueError("model has no quantizer attachments")
        return self.attachments[0].bits

    # -- forward --------------------------------------------------------
    def _choices(self, choices):
        if choices is not None:
            return choices
        cand = self.candidate_bits()
        return [(cand.index(b), None) for b in self.deployed_bits()]

    @staticmethod
    def _mix(fn, r: int, onehot, n_cand: int):
        out = fn(r)
        if onehot is None:
            return out
        # value-zero terms carrying the gradient into the soft selection
        for j in range(n_cand):
            out = out + (onehot[j] - onehot[j].detach()) * fn(j)
        return out

    def forward(self, x, mode: str = "fp", choices=None) -> torch.Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"input has dimension {x.shape[-1]}, model expects {self.dims[0]}")
        if mode not in ("fp", "quantized"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "quantized" and self.attachments is None:
            raise ValueError("quantized mode requested but no quantizers are attached")
        h = x
        last = self.n_layers - 1
        picks = self._choices(choices) if mode == "quantized" else None
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if mode == "quantized":
                att = self.attachments[layer]
                r, onehot = picks[layer]
                w = self._mix(lambda j: att.qweight(w, j), r, onehot, len(att.bits))
            h = F.linear(h, w, b)
            if layer < last:
                h = torch.relu(h)
                if mode == "quantized" and self.attachments[layer].quantize_activations:
                    att = self.attachments[layer]
                    hh = h
                    h = self._mix(lambda j: att.qact(hh, j), r, onehot, len(att.bits))
        return h

    def hidden_inputs(self, x) -> list[torch.Tensor]:
        """Full-precision input to every layer (for layerwise calibration)."""
        h = as_tensor(x)
        outs = []
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            outs.append(h)
            h = F.linear(h, w, b)
            if layer < self.n_layers - 1:
                h = torch.relu(h)
        return outs

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "dims": list(self.dims),
            "weights": [w.detach().tolist() for w in self.weights],
            "biases": [b.detach().tolist() for b in self.biases],
        }
        if self.attachments is not None:
            d["quantizers"] = [a.to_dict() for a in self.attachments]
        if self.policy is not None:
            d["policy"] = {"bits": list(self.policy.bits),
                           "logits": self.policy.logits.detach().tolist(),
                           "selected": self.policy.discretize()}
        if self.fixed_bits is not None:
            d["fixed_bits"] = list(self.fixed_bits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        model = cls(d["dims"], seed=None)
        with torch.no_grad():
            for p, v in zip(model.weights, d["weights"]):
                p.copy_(torch.tensor(v, dtype=torch.float64))
            for p, v in zip(model.biases, d["biases"]):
                p.copy_(torch.tensor(v, dtype=torch.float64))
        if "quantizers" in d:
            model.attachments = nn.ModuleList(QuantAttachment.from_dict(a) for a in d["quantizers"])
        if "policy" in d:
            model.policy = QuantPolicy(model.n_layers, d["policy"]["bits"], d["policy"]["logits"])
        model.fixed_bits = d.get("fixed_bits")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.backbone_parameters():
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()


@dataclass
class GradientBundle:
    params: dict[str, np.ndarray]
    input: np.ndarray | None


def forward_logits(model: ModelGraph, x, mode: str = "fp") -> torch.Tensor:
    return model(x, mode)


def predict(model: ModelGraph, x, mode: str = "fp") -> np.ndarray:
    with torch.no_grad():
        return torch.argmax(model(x, mode), dim=-1).numpy()


def cross_entropy(logits: torch.Tensor, labels, reduction: str = "mean") -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long) if not isinstance(labels, torch.Tensor) \
        else labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError("label out of range")
    return F.cross_entropy(logits, labels, reduction=reduction)


def loss_and_grads(model: ModelGraph, x, labels, wrt: str = "params", mode: str = "fp"):
    """Mean cross-entropy and the requested gradients."""
    if wrt not in ("params", "input", "both"):
        raise ValueError(f"unknown gradient target {wrt!r}")
    x = as_tensor(x).detach().clone()
    if x.ndim == 1:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    x.requires_grad_(wrt in ("input", "both"))
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = cross_entropy(model(x, mode), labels)
    targets = []
    if wrt in ("params", "both"):
        targets += [p for _, p in named]
    if wrt in ("input", "both"):
        targets.append(x)
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    params = {}
    if wrt in ("params", "both"):
        for (name, p), g in zip(named, grads):
            params[name] = np.zeros(p.shape) if g is None else g.detach().numpy().copy()
    inp = grads[-1].detach().numpy().copy() if wrt in ("input", "both") else None
    return float(loss.detach()), GradientBundle(params, inp)


def target_margin(logits, y_tgt):
    """Target logit minus the best competing logit (vectorized over leading axes)."""
    is_torch = isinstance(logits, torch.Tensor)
    z = logits if is_torch else np.asarray(logits, dtype=np.float64)
    n_classes = z.shape[-1]
    if n_classes < 2:
        raise ValueError("target margin needs at least two classes")
    y = np.asarray(y_tgt)
    if np.any((y < 0) | (y >= n_classes)):
        raise ValueError("target class out of range")
    if is_torch:
        yt = torch.as_tensor(y, dtype=torch.long)
        if z.ndim == 1:
            others = torch.cat([z[:int(y)], z[int(y) + 1:]])
            return z[int(y)] - others.max()
        yt = yt.expand(z.shape[0]) if yt.ndim == 0 else yt
        tgt = z.gather(-1, yt[:, None]).squeeze(-1)
        masked = z.masked_fill(F.one_hot(yt, n_classes).bool(), float("-inf"))
        return tgt - masked.max(dim=-1).values
    if z.ndim == 1:
        return float(z[int(y)] - np.max(np.delete(z, int(y))))
    y = np.broadcast_to(y, z.shape[:-1])
    tgt = np.take_along_axis(z, y[..., None], -1)[..., 0]
    masked = z.copy()
    np.put_along_axis(masked, y[..., None], -np.inf, -1)
    return tgt - masked.max(axis=-1)


def train_fp(model: ModelGraph, x, y, epochs: int = 30, lr: float = 0.05, momentum: float = 0.9,
             batch_size: int = 64, seed: int = 0, weight_decay: float = 0.0) -> list[dict]:
    """Plain minibatch SGD with momentum on the full-precision path."""
    x = as_tensor(x)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    opt = torch.optim.SGD(model.backbone_parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    log = []
    for epoch in range(epochs):
        perm = torch.randperm(len(y), generator=gen)
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = perm[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.append({"epoch": epoch, "loss": total / len(y)})
    return log


def accuracy(model: ModelGraph, x, y, mode: str = "fp") -> float:
    return float(np.mean(predict(model, x, mode) == np.asarray(y)))
