"""Rectified logit-wise transfer: the adaptive rectification module and its KL loss.

ARM works on plain arrays and is gradient-free; the rectified label of one
student is a fixed target for the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import EPS, Tensor

ALL_FACTORS = ("a", "s", "c")


@dataclass
class RectifiedLabel:
    P_r: np.ndarray  # N x L x H x W
    mask: np.ndarray  # N x H x W, bool error mask M
    lam: np.ndarray  # N x H x W, zero where M == 0
    lam_a: np.ndarray
    lam_s: np.ndarray
    lam_c: np.ndarray


def _check_labels(Y: np.ndarray, L: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.size and (Y.min() < 0 or Y.max() >= L):
        raise ValueError(f"labels must lie in [0, {L})")
    return Y.astype(np.int64)


def _probs(P) -> np.ndarray:
    return P.data if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64)


def error_mask(P, Y) -> np.ndarray:
    """``argmax(P) != Y`` per pixel; ties go to the lowest class index."""
    P = _probs(P)
    Y = _check_labels(Y, P.shape[1])
    return np.argmax(P, axis=1) != Y


def one_hot(Y, L: int) -> np.ndarray:
    Y = _check_labels(Y, L)
    out = np.zeros((Y.shape[0], L) + Y.shape[1:])
    np.put_along_axis(out, Y[:, None], 1.0, axis=1)
    return out


def lambda_align(p_mis: float, p_tru: float) -> float:
    assert p_mis >= p_tru, "alignment needs p_mis >= p_tru"
    return 1.0 / (1.0 + (p_mis - p_tru))


def lambda_sim(P_pix: Sequence[float], Y_onehot: Sequence[float]) -> float:
    ce = -sum(y * math.log(max(p, EPS)) for p, y in zip(P_pix, Y_onehot))
    return math.exp(-ce)


def lambda_cert(P_pix: Sequence[float]) -> float:
    s = -sum(p * math.log(max(p, EPS)) for p in P_pix)
    return math.exp(-s)


def arm(P, Y, factors: Sequence[str] = ALL_FACTORS) -> RectifiedLabel:
    """Rectify the mis-segmented pixels of ``P`` toward the one-hot ground truth.

    ``factors`` picks which of the alignment (``a``), similarity (``s``) and
    certainty (``c``) factors make up lambda; an empty selection gives
    lambda = 1, i.e. the unrectified prediction.
    """
    P = _probs(P)
    L = P.shape[1]
    Y = _check_labels(Y, L)
    M = np.argmax(P, axis=1) != Y
    onehot = one_hot(Y, L)

    p_mis = P.max(axis=1)
    p_tru = np.take_along_axis(P, Y[:, None], axis=1)[:, 0]
    lam_a = 1.0 / (1.0 + (p_mis - p_tru))
    lam_s = np.exp(np.log(np.maximum(p_tru, EPS)))  # exp(-CE) with a one-hot target
    lam_c = np.exp((P * np.log(np.maximum(P, EPS))).sum(axis=1))  # exp(-entropy)

    lam = np.ones_like(p_mis)
    for name, part in (("a", lam_a), ("s", lam_s), ("c", lam_c)):
        if name in factors:
            lam = lam * part
    zero = np.zeros_like(lam)
    lam = np.where(M, lam, zero)
    rectified = lam[:, None] * P + (1.0 - lam[:, None]) * onehot
    P_r = np.where(M[:, None], rectified, P)
    return RectifiedLabel(
        P_r=P_r,
        mask=M,
        lam=lam,
        lam_a=np.where(M, lam_a, zero),
        lam_s=np.where(M, lam_s, zero),
        lam_c=np.where(M, lam_c, zero),
    )


def kl_map_loss(P_self: Tensor, target, eps: float = EPS) -> Tensor:
    """Mean over pixels of ``KL(P_self || target)`` along axis 1.

    ``target`` is treated as a constant; gradient reaches ``P_self`` only.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if tuple(P_self.shape) != tgt.shape:
        raise T.ShapeError(f"KL shape mismatch {P_self.shape} vs {tgt.shape}")
    log_tgt = np.log(np.maximum(tgt, eps))
    per_pixel = (P_self * (T.safe_log(P_self, eps) - log_tgt)).sum(axis=1)
    return per_pixel.mean()


def rlcl_loss(P_self: Tensor, P_r_peer) -> Tensor:
    return kl_map_loss(P_self, P_r_peer)
