"""Plain-Python scalar references for the vectorised kernels.

Each function loops pixel by pixel (or point by point) with the ``math``
module and shares no code with the implementation it checks.  They are
used by the test-suite and by ``ctrcl oracle-test``.
"""

from __future__ import annotations

import math
from typing import List

import numpy as np

EPS = 1e-8
PROTO_EPS = 1e-8
COS_GUARD = 1e-8


def nearest_index(i: int, n_in: int, n_out: int) -> int:
    return min(max(math.floor((i + 0.5) * n_in / n_out - 0.5), 0), n_in - 1)


def nearest_downsample(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape[-2:]
    out = np.empty(labels.shape[:-2] + (out_h, out_w), dtype=labels.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[..., i, j] = labels[..., nearest_index(i, h, out_h), nearest_index(j, w, out_w)]
    return out


def bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """align_corners=False bilinear resize of a 2-D array."""
    h, w = x.shape
    out = np.empty((out_h, out_w))

    def src(i, n_in, n_out):
        s = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(s), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), s - i0

    for i in range(out_h):
        y0, y1, fy = src(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = src(j, w, out_w)
            top = x[y0, x0] * (1 - fx) + x[y0, x1] * fx
            bot = x[y1, x0] * (1 - fx) + x[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def matmul(a, b) -> np.ndarray:
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i][t] * b[t][j] for t in range(k))
    return out


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b, ic, y, xx] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# rectification
# ---------------------------------------------------------------------------


def arm_pixel(p: List[float], y: int, factors: str = "asc"):
    """Rectify one pixel; returns ``(rectified, lam, mis_index)``."""
    mis = 0
    for i, v in enumerate(p):
        if v > p[mis]:
            mis = i
    if mis == y:
        return list(p), 0.0, mis
    p_mis, p_tru = p[mis], p[y]
    lam = 1.0
    if "a" in factors:
        lam *= 1.0 / (1.0 + (p_mis - p_tru))
    if "s" in factors:
        lam *= math.exp(-(-math.log(max(p_tru, EPS))))
    if "c" in factors:
        entropy = -sum(v * math.log(max(v, EPS)) for v in p)
        lam *= math.exp(-entropy)
    out = [lam * v + (1.0 - lam) * (1.0 if i == y else 0.0) for i, v in enumerate(p)]
    return out, lam, mis


def arm(P: np.ndarray, Y: np.ndarray, factors: str = "asc"):
    n, L, h, w = P.shape
    P_r = np.empty_like(P)
    lam = np.zeros((n, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                px = [float(P[b, c, i, j]) for c in range(L)]
                out, lm, _ = arm_pixel(px, int(Y[b, i, j]), factors)
                P_r[b, :, i, j] = out
                lam[b, i, j] = lm
    return P_r, lam


def error_mask(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    n, L, h, w = P.shape
    out = np.zeros((n, h, w), dtype=bool)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                best = 0
                for c in range(1, L):
                    if P[b, c, i, j] > P[b, best, i, j]:
                        best = c
                out[b, i, j] = best != Y[b, i, j]
    return out


def kl_pixelwise_mean(P: np.ndarray, Q: np.ndarray) -> float:
    n, L, h, w = P.shape
    tot = 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for c in range(L):
                    p, q = P[b, c, i, j], Q[b, c, i, j]
                    tot += p * (math.log(max(p, EPS)) - math.log(max(q, EPS)))
    return tot / (n * h * w)


# ---------------------------------------------------------------------------
# category perception
# ---------------------------------------------------------------------------


def cpm(F: np.ndarray, Y: np.ndarray, alpha: float = 20.0) -> List[dict]:
    """Per sample, a dict ``class -> h x w`` map of class-aware probabilities."""
    n, c, h, w = F.shape
    Yd = nearest_downsample(np.asarray(Y), h, w)
    protos = {}
    for cls in sorted(set(Yd.reshape(-1).tolist())):
        acc = [0.0] * c
        holders = 0
        for b in range(n):
            cnt = 0
            tot = [0.0] * c
            for i in range(h):
                for j in range(w):
                    if Yd[b, i, j] == cls:
                        cnt += 1
                        for ch in range(c):
                            tot[ch] += F[b, ch, i, j]
            if cnt:
                holders += 1
                for ch in range(c):
                    acc[ch] += tot[ch] / (cnt + PROTO_EPS)
        protos[cls] = [v / holders for v in acc]
    out = []
    for b in range(n):
        present = sorted(set(Yd[b].reshape(-1).tolist()))
        maps = {cls: np.zeros((h, w)) for cls in present}
        for i in range(h):
            for j in range(w):
                vec = [F[b, ch, i, j] for ch in range(c)]
                na = math.sqrt(sum(v * v for v in vec))
                scores = []
                for cls in present:
                    p = protos[cls]
                    nb = math.sqrt(sum(v * v for v in p))
                    d = 1.0 - sum(x * y for x, y in zip(vec, p)) / max(na * nb, COS_GUARD)
                    scores.append(-alpha * d)
                top = max(scores)
                ex = [math.exp(s - top) for s in scores]
                z = sum(ex)
                for cls, e in zip(present, ex):
                    maps[cls][i, j] = e / z
        out.append(maps)
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    inter = sa = sb = 0
    for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        sa += bool(u)
        sb += bool(v)
        inter += bool(u) and bool(v)
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def jac(a: np.ndarray, b: np.ndarray) -> float:
    inter = union = 0
    for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        inter += bool(u) and bool(v)
        union += bool(u) or bool(v)
    return 1.0 if union == 0 else inter / union


def boundary_points(mask: np.ndarray) -> list:
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = i == 0 or j == 0 or i == h - 1 or j == w - 1
            if edge or not (mask[i - 1, j] and mask[i + 1, j] and mask[i, j - 1] and mask[i, j + 1]):
                pts.append((i, j))
    return pts


def hsd(a: np.ndarray, b: np.ndarray) -> float:
    pa, pb = boundary_points(np.asarray(a, bool)), boundary_points(np.asarray(b, bool))
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.hypot(*a.shape)

    def directed(src, dst):
        return max(min(math.hypot(i - k, j - l) for k, l in dst) for i, j in src)

    return max(directed(pa, pb), directed(pb, pa))


def mae(a: np.ndarray, b: np.ndarray) -> float:
    vals = [abs(float(u) - float(v)) for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist())]
    return sum(vals) / len(vals)
