"""Vectorised kernels versus the scalar references on random small instances."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import reference as ref
from . import tensor as T
from .cfcl import cpm
from .metrics import dsc, hsd, jac, mae
from .rlcl import arm

TOLERANCE = 1e-9
INSTANCES = 50


def _probs(rng, n, L, h, w):
    z = np.exp(rng.normal(scale=1.5, size=(n, L, h, w)))
    return z / z.sum(axis=1, keepdims=True)


def _mask_pair(rng):
    h, w = (int(v) for v in rng.integers(1, 17, size=2))
    kind = rng.integers(4)
    if kind == 0:  # blobby masks
        a = rng.random((h, w)) < rng.uniform(0.2, 0.8)
        b = rng.random((h, w)) < rng.uniform(0.2, 0.8)
    elif kind == 1:  # one side empty
        a = rng.random((h, w)) < 0.5
        b = np.zeros((h, w), bool)
    elif kind == 2:
        a = b = np.zeros((h, w), bool)
    else:  # rectangles
        a, b = np.zeros((h, w), bool), np.zeros((h, w), bool)
        for m in (a, b):
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            m[y0 : y0 + rng.integers(1, h + 1), x0 : x0 + rng.integers(1, w + 1)] = True
    return a, b


def check_arm(rng) -> float:
    n, L = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    h, w = (int(v) for v in rng.integers(1, 7, size=2))
    P = _probs(rng, n, L, h, w)
    Y = rng.integers(0, L, size=(n, h, w))
    factors = "".join(f for f in "asc" if rng.random() < 0.8)
    got = arm(P, Y, factors)
    want_P, want_lam = ref.arm(P, Y, factors)
    return float(max(np.abs(got.P_r - want_P).max(), np.abs(got.lam - want_lam).max()))


def check_cpm(rng) -> float:
    n, K, C = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    scale = int(rng.integers(1, 3))
    F = rng.normal(size=(n, C, h, w))
    Y = rng.integers(0, K, size=(n, h * scale, w * scale))
    got = cpm(T.Tensor(F), Y)
    want = ref.cpm(F, Y)
    worst = 0.0
    for b in range(n):
        for k, cls in enumerate(got.classes):
            if got.present[b, k]:
                worst = max(worst, float(np.abs(got.R.data[b, k] - want[b][cls]).max()))
            else:
                worst = max(worst, float(np.abs(got.R.data[b, k]).max()))
                if cls in want[b]:
                    return float("inf")
        if set(want[b]) != set(c for c, p in zip(got.classes, got.present[b]) if p):
            return float("inf")
    return worst


def _metric_check(fast, slow) -> Callable[[np.random.Generator], float]:
    def run(rng):
        a, b = _mask_pair(rng)
        return abs(fast(a, b) - slow(a, b))

    return run


CHECKS: Dict[str, Callable[[np.random.Generator], float]] = {
    "arm": check_arm,
    "cpm": check_cpm,
    "dsc": _metric_check(dsc, ref.dsc),
    "jac": _metric_check(jac, ref.jac),
    "hsd": _metric_check(hsd, ref.hsd),
    "mae": _metric_check(mae, ref.mae),
}


def run_oracles(instances: int = INSTANCES, seed: int = 0) -> Dict[str, float]:
    """Largest absolute deviation per kernel over ``instances`` random cases."""
    out = {}
    for i, (name, check) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, i])
        out[name] = max(check(rng) for _ in range(instances))
    return out


def oracle_cmd(instances: int = INSTANCES, echo: Callable[[str], None] = print) -> int:
    worst = run_oracles(instances)
    for name, err in worst.items():
        echo(f"{'PASS' if err <= TOLERANCE else 'FAIL'}  {name:<6s} max abs dev {err:.3e} over {instances} instances")
    return 0 if all(e <= TOLERANCE for e in worst.values()) else 1
