"""Segmentation loss, the combined per-student objective, AdamW and poly LR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .rlcl import one_hot
from .tensor import EPS, Tensor


@dataclass
class LossWeights:
    beta: float = 3.0
    gamma1: float = 1.0
    gamma2: float = 2.0

    def __post_init__(self):
        if min(self.beta, self.gamma1, self.gamma2) < 0:
            raise ValueError("loss weights must be non-negative")


def seg_loss(P: Tensor, Y) -> Tensor:
    """Pixel-averaged cross entropy ``-ln(max(P[y], 1e-8))``."""
    target = one_hot(Y, P.shape[1])
    p_true = (P * target).sum(axis=1)
    return -T.safe_log(p_true, EPS).mean()


def total_loss(
    seg: Tensor,
    rlcl: Optional[Tensor],
    cfcl_e: Optional[Tensor],
    cfcl_d: Optional[Tensor],
    w: LossWeights,
) -> Tensor:
    """``seg + beta*rlcl + gamma1*cfcl_e + gamma2*cfcl_d``; ``None`` terms are gated off."""
    out = seg
    for term, weight in ((rlcl, w.beta), (cfcl_e, w.gamma1), (cfcl_d, w.gamma2)):
        if term is not None:
            out = out + term * weight
    return out


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


@dataclass
class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    base_lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, Tensor], lr: Optional[float] = None) -> None:
        lr = self.base_lr if lr is None else lr
        missing = [k for k, p in params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            data = p.data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def optimizer_step(params: Dict[str, Tensor], state: AdamW, lr_t: float) -> None:
    state.step(params, lr_t)
