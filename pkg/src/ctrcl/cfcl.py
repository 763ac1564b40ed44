"""Class-aware feature-wise transfer via the category perception module (CPM).

A student's feature map is turned into a per-pixel distribution over the
classes present in each sample: prototypes come from masked average pooling
under the (nearest-downsampled) label map, averaged over the samples that
contain the class, and each pixel is softmax-scored by its scaled cosine
distance to those prototypes.  Everything stays on the owning student's tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .tensor import EPS, Tensor

ALPHA = 20.0
PROTO_EPS = 1e-8
COS_GUARD = 1e-8
_SQ_FLOOR = 1e-30  # keeps sqrt differentiable at an all-zero feature vector


@dataclass
class PrototypeSet:
    classes: List[int]  # ascending class ids present somewhere in the batch
    prototypes: Tensor  # len(classes) x C
    present: np.ndarray  # N x len(classes) bool, class present in sample n
    counts: np.ndarray  # len(classes), N_l

    def vector(self, cls: int) -> np.ndarray:
        return self.prototypes.data[self.classes.index(cls)]


@dataclass
class ClassAwareRep:
    R: Tensor  # N x K x h x w, exactly 0 on slots absent from a sample
    classes: List[int]  # class id of each of the K slots
    present: np.ndarray  # N x K bool

    @property
    def class_index(self) -> List[List[int]]:
        return [[c for c, p in zip(self.classes, row) if p] for row in self.present]

    def detach(self) -> "ClassAwareRep":
        return ClassAwareRep(T.detach(self.R), list(self.classes), self.present.copy())


def downsample_labels(Y, h: int, w: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.shape[-2:] == (h, w):
        return Y
    return T.nearest_downsample(Y, h, w)


def compute_prototypes(F: Tensor, Y, eps: float = PROTO_EPS) -> PrototypeSet:
    """Masked average pooling per sample, then the mean over samples holding the class."""
    F = T.as_tensor(F)
    n, c, h, w = F.shape
    Yd = downsample_labels(Y, h, w).reshape(n, h * w)
    classes = sorted(int(v) for v in np.unique(Yd))
    mask = (Yd[:, None, :] == np.asarray(classes)[None, :, None]).astype(np.float64)  # N,K,hw
    pix = mask.sum(axis=2)  # N,K
    present = pix > 0
    counts = present.sum(axis=0)  # N_l

    sums = T.matmul(mask, F.reshape(n, c, h * w).transpose(0, 2, 1))  # N,K,C
    means = sums * (1.0 / (pix + eps))[:, :, None]
    protos = means.sum(axis=0) * (1.0 / counts)[:, None]
    return PrototypeSet(classes, protos, present, counts)


def _norm(x: Tensor, axis: int) -> Tensor:
    return T.sqrt(T.clamp((x * x).sum(axis=axis), _SQ_FLOOR))


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 1.0 - float(a @ b) / max(float(np.linalg.norm(a) * np.linalg.norm(b)), COS_GUARD)


def class_aware_rep(F: Tensor, protos: PrototypeSet, alpha: float = ALPHA) -> ClassAwareRep:
    """``softmax_k(-alpha * d(F_pixel, p_k))`` over the classes present in each sample."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    F = T.as_tensor(F)
    n, c, h, w = F.shape
    if protos.present.shape[0] != n:
        raise ValueError("prototype set was built for a different batch size")
    if not protos.present.any(axis=1).all():
        raise ValueError("a sample has no prototype to compare against")
    flat = F.reshape(n, c, h * w)
    P = protos.prototypes
    dot = T.matmul(P, flat)  # N,K,hw
    k = P.shape[0]
    denom = _norm(P, 1).reshape(1, k, 1) * _norm(flat, 1).reshape(n, 1, h * w)
    dist = 1.0 - dot / T.clamp(denom, COS_GUARD)
    R = T.softmax(dist * (-alpha), axis=1, mask=protos.present[:, :, None])
    return ClassAwareRep(R.reshape(n, k, h, w), list(protos.classes), protos.present)


def cpm(F: Tensor, Y, alpha: float = ALPHA) -> ClassAwareRep:
    return class_aware_rep(F, compute_prototypes(F, Y), alpha)


def cfcl_loss(R_self: ClassAwareRep, R_peer: ClassAwareRep, resample: bool = False) -> Tensor:
    """Mean per-pixel ``KL(R_self || R_peer)`` over the present-class slots.

    The peer map is a constant.  With ``resample`` a peer map of a different
    spatial size is nearest-resampled to the learner's grid first.
    """
    if R_self.classes != R_peer.classes or not np.array_equal(R_self.present, R_peer.present):
        raise ValueError("class-aware maps cover different class slots")
    peer = R_peer.R.data
    if peer.shape != tuple(R_self.R.shape):
        if not resample or peer.shape[:2] != tuple(R_self.R.shape[:2]):
            raise T.ShapeError(f"spatial mismatch {R_self.R.shape} vs {peer.shape}")
        peer = T.nearest_resize(peer, *R_self.R.shape[2:])
    log_peer = np.log(np.maximum(peer, EPS))
    R = R_self.R
    return (R * (T.safe_log(R) - log_peer)).sum(axis=1).mean()

