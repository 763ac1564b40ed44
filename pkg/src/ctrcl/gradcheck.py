"""Finite-difference gradient suite over the primitives and the composite losses."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .cfcl import cfcl_loss, cpm
from .objective import LossWeights, seg_loss, total_loss
from .rlcl import arm, kl_map_loss
from .students import StudentConfig, init_student

TOLERANCE = 1e-4
STEP = 1e-5
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


@dataclass
class GradReport:
    results: List[OpResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> List[str]:
        out = []
        for r in self.results:
            out.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22s} max rel err {r.max_rel_error:.3e}")
        out.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} operations passed")
        return out


def _weights(rng, shape):
    # random projection so every output element contributes to the scalar
    return rng.normal(size=shape)


def _project(y: T.Tensor, w: np.ndarray) -> T.Tensor:
    return (y * w).sum()


def _away_from(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _simplex(rng, shape, axis=1):
    z = np.exp(rng.normal(size=shape))
    return z / z.sum(axis=axis, keepdims=True)


Case = Callable[[np.random.Generator], List[float]]


def _unary(fn, make_x) -> Case:
    def run(rng):
        x = make_x(rng)
        w = _weights(rng, np.shape(fn(T.Tensor(x)).data))
        return [T.finite_diff_check(lambda t: _project(fn(t), w), x, STEP)]

    return run


def _binary(fn, make_a, make_b) -> Case:
    def run(rng):
        a, b = make_a(rng), make_b(rng)
        w = _weights(rng, np.shape(fn(T.Tensor(a), T.Tensor(b)).data))
        return [
            T.finite_diff_check(lambda t: _project(fn(t, T.Tensor(b)), w), a, STEP),
            T.finite_diff_check(lambda t: _project(fn(T.Tensor(a), t), w), b, STEP),
        ]

    return run


def _seg_case(rng):
    logits = rng.normal(size=(2, 3, 4, 4))
    Y = rng.integers(0, 3, size=(2, 4, 4))
    return [T.finite_diff_check(lambda t: seg_loss(T.softmax(t, axis=1), Y), logits, STEP)]


def _rlcl_case(rng):
    logits = rng.normal(size=(2, 3, 4, 4))
    peer = _simplex(rng, (2, 3, 4, 4))
    Y = rng.integers(0, 3, size=(2, 4, 4))
    target = arm(peer, Y).P_r  # rectified peer label, a constant
    return [T.finite_diff_check(lambda t: kl_map_loss(T.softmax(t, axis=1), target), logits, STEP)]


def _cpm_labels(rng, n, h, w):
    Y = rng.integers(0, 3, size=(n, h, w))
    Y[:, 0, 0] = 0
    return Y


def _cpm_case(rng):
    F = rng.normal(size=(2, 4, 4, 4))
    Y = _cpm_labels(rng, 2, 8, 8)
    R0 = cpm(T.Tensor(F), Y)
    w = _weights(rng, R0.R.shape)
    return [T.finite_diff_check(lambda t: _project(cpm(t, Y).R, w), F, STEP)]


def _cfcl_case(rng):
    F = rng.normal(size=(2, 4, 4, 4))
    G = rng.normal(size=(2, 5, 4, 4))
    Y = _cpm_labels(rng, 2, 8, 8)
    peer = cpm(T.Tensor(G), Y).detach()
    return [T.finite_diff_check(lambda t: cfcl_loss(cpm(t, Y), peer), F, STEP)]


def _total_case(rng):
    logits = rng.normal(size=(2, 3, 8, 8))
    FE = rng.normal(size=(2, 4, 2, 2))
    FD = rng.normal(size=(2, 4, 4, 4))
    Y = _cpm_labels(rng, 2, 8, 8)
    peer_P = arm(_simplex(rng, (2, 3, 8, 8)), Y).P_r
    peer_E = cpm(T.Tensor(rng.normal(size=(2, 6, 2, 2))), Y).detach()
    peer_D = cpm(T.Tensor(rng.normal(size=(2, 6, 4, 4))), Y).detach()
    w = LossWeights()

    def loss(lg, fe, fd):
        P = T.softmax(lg, axis=1)
        return total_loss(seg_loss(P, Y), kl_map_loss(P, peer_P), cfcl_loss(cpm(fe, Y), peer_E), cfcl_loss(cpm(fd, Y), peer_D), w)

    return [
        T.finite_diff_check(lambda t: loss(t, T.Tensor(FE), T.Tensor(FD)), logits, STEP),
        T.finite_diff_check(lambda t: loss(T.Tensor(logits), t, T.Tensor(FD)), FE, STEP),
        T.finite_diff_check(lambda t: loss(T.Tensor(logits), T.Tensor(FE), t), FD, STEP),
    ]


def _student_case(kind):
    def run(rng):
        seed = int(rng.integers(1 << 31))
        st = init_student(StudentConfig(kind=kind, base_width=4, attention_heads=2, seed=seed))
        x = rng.uniform(size=(2, 3, 16, 16))
        Y = rng.integers(0, 4, size=(2, 16, 16))
        idx = [tuple(int(rng.integers(s)) for s in x.shape) for _ in range(6)]
        return [T.finite_diff_check(lambda t: seg_loss(st.forward(t, train=True).P, Y), x, STEP, indices=idx)]

    return run


def build_suite() -> Dict[str, Case]:
    normal = lambda shape: (lambda rng: rng.normal(size=shape))  # noqa: E731
    positive = lambda shape: (lambda rng: rng.uniform(0.2, 2.0, size=shape))  # noqa: E731
    mask = np.array([[True, True, False, True], [False, True, True, True]])
    return {
        "add": _binary(T.add, normal((3, 4)), normal((4,))),
        "sub": _binary(T.sub, normal((3, 4)), normal((3, 1))),
        "mul": _binary(T.mul, normal((3, 4)), normal((3, 4))),
        "div": _binary(T.div, normal((3, 4)), positive((3, 4))),
        "neg": _unary(lambda t: -t, normal((3, 4))),
        "exp": _unary(T.exp, normal((3, 4))),
        "log": _unary(T.log, positive((3, 4))),
        "sqrt": _unary(T.sqrt, positive((3, 4))),
        "relu": _unary(T.relu, lambda rng: _away_from(rng, (3, 4))),
        "gelu": _unary(T.gelu, normal((3, 4))),
        "clamp": _unary(lambda t: T.clamp(t, 0.05), lambda rng: _away_from(rng, (3, 4))),
        "reshape": _unary(lambda t: t.reshape(4, 6), normal((2, 3, 4))),
        "transpose": _unary(lambda t: t.transpose(2, 0, 1), normal((2, 3, 4))),
        "getitem": _unary(lambda t: t[1:, ::2], normal((3, 4))),
        "concat": _binary(lambda a, b: T.concat([a, b], axis=1), normal((2, 3)), normal((2, 2))),
        "sum": _unary(lambda t: T.reduce(t, "sum", axis=1), normal((3, 4, 2))),
        "mean": _unary(lambda t: T.reduce(t, "mean", axis=(0, 2), keepdims=True), normal((3, 4, 2))),
        "matmul": _binary(T.matmul, normal((2, 3, 4)), normal((4, 5))),
        "matmul_batched": _binary(T.matmul, normal((2, 3, 4)), normal((2, 4, 2))),
        "conv2d": _binary(lambda x, w: T.conv2d(x, w, 1, 1), normal((2, 2, 5, 5)), normal((3, 2, 3, 3))),
        "conv2d_strided": _binary(lambda x, w: T.conv2d(x, w, 2, 1), normal((1, 2, 6, 6)), normal((2, 2, 3, 3))),
        "softmax": _unary(lambda t: T.softmax(t, axis=1), normal((2, 4, 3))),
        "softmax_masked": _unary(lambda t: T.softmax(t, axis=1, mask=mask), normal((2, 4))),
        "normalize": _unary(lambda t: T.normalize(t, (0, 2, 3)), normal((3, 2, 2, 2))),
        "bilinear_upsample": _unary(lambda t: T.bilinear_upsample(t, 7, 8), normal((1, 2, 3, 4))),
        "seg_loss": _seg_case,
        "rlcl_loss": _rlcl_case,
        "cpm": _cpm_case,
        "cfcl_loss": _cfcl_case,
        "total_loss": _total_case,
        "student_cnn": _student_case("cnn"),
        "student_transformer": _student_case("transformer"),
    }


def run_suite(seeds: Sequence[int] = SEEDS, only: Optional[Sequence[str]] = None) -> GradReport:
    results = []
    for name, case in build_suite().items():
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)])
            for err in case(rng):
                worst = max(worst, float(err)) if np.isfinite(err) else float("inf")
        results.append(OpResult(name, worst, time.perf_counter() - t0))
    return GradReport(results)


def gradcheck_cmd(seeds: Sequence[int] = SEEDS, echo: Callable[[str], None] = print) -> int:
    """Run the suite, print one line per operation, return a process exit code."""
    report = run_suite(seeds)
    for line in report.lines():
        echo(line)
    return 0 if report.passed else 1
