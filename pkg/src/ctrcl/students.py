"""Two heterogeneous toy segmentation students.

Both map ``x[N,3,H,W]`` to class probabilities at full resolution plus an
encoder feature map at H/8 and a decoder feature map at H/4, so the
feature-space transfer can compare them pixel for pixel.

CNN student
    ``depth`` stages of [3x3 conv (stride 2) -> norm -> relu] with widths
    ``base_width * 2**k``; for ``depth == 2`` a stride-2 stem keeps the
    deepest map at H/8.  FPN-style decoder: 1x1 laterals to
    ``2 * base_width`` channels, top-down bilinear upsample + add down to H/4,
    a 3x3 smoothing conv -> norm -> relu gives F_D.

Transformer student
    4x4 patch embedding to ``width`` channels, a 3x3 conv positional term,
    one pre-norm attention block at H/4, 2x2 token merging to H/8, one block
    at H/8.  SegFormer-style decoder: per-stage linear projections to
    ``width``, upsample to H/4, concatenate, linear fuse + relu gives F_D.

Parameter count of the default CNN (L=4, base_width=16, depth=3), with
``w = (16, 32, 64)`` and decoder width ``d = 32``::

    sum_k 9*w_in*w_k + 2*w_k                  (encoder convs, norm affines)
  + sum_{k>=2} (w_k*d + d)                     (laterals from stages 2..3)
  + 9*d*d + 2*d                                (smoothing conv + norm)
  + d*L + L                                    (classifier)
  = 23696 + 3136 + 9280 + 132 = 36244
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = Dict[str, Tensor]
Buffers = Dict[str, np.ndarray]

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


@dataclass
class StudentConfig:
    kind: str = "cnn"
    in_channels: int = 3
    num_classes: int = 4
    base_width: int = 16
    depth: int = 3
    attention_heads: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("cnn", "transformer"):
            raise ValueError(f"unknown student kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.depth not in (2, 3):
            raise ValueError("depth must be 2 or 3")
        if self.kind == "transformer" and (self.width % self.attention_heads):
            raise ValueError("transformer width must divide evenly into heads")

    @property
    def width(self) -> int:
        # transformer embedding width
        return 2 * self.base_width

    @property
    def decoder_width(self) -> int:
        return 2 * self.base_width


@dataclass
class StudentOutput:
    P: Tensor
    F_E: Tensor
    F_D: Tensor
    attention: list = field(default_factory=list)


@dataclass
class Student:
    """Params plus non-trainable buffers (running norm statistics)."""

    cfg: StudentConfig
    params: Params
    buffers: Buffers

    def forward(self, x, train: bool = True, keep_attention: bool = False) -> StudentOutput:
        if self.cfg.kind == "cnn":
            return cnn_forward(self.params, x, self.buffers, train=train)
        return transformer_forward(self.params, x, self.cfg, train=train, keep_attention=keep_attention)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, gain=6.0):
    bound = math.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _cnn_widths(cfg: StudentConfig):
    return [cfg.base_width * 2**k for k in range(cfg.depth)]


def init_student(cfg: StudentConfig) -> Student:
    """Fan-in scaled uniform weights (deterministic in ``cfg.seed``), zero biases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}
    buffers: Buffers = {}

    def conv(name, cin, cout, k, bias=False):
        params[f"{name}.w"] = _uniform(rng, (cout, cin, k, k), cin * k * k)
        if bias:
            params[f"{name}.b"] = _zeros((cout, 1, 1))

    def norm(name, c, running=True):
        params[f"{name}.g"] = _ones((c,))
        params[f"{name}.b"] = _zeros((c,))
        if running:
            buffers[f"{name}.mean"] = np.zeros(c)
            buffers[f"{name}.var"] = np.ones(c)

    def linear(name, cin, cout, gain=3.0):
        params[f"{name}.w"] = _uniform(rng, (cin, cout), cin, gain)
        params[f"{name}.b"] = _zeros((cout,))

    L = cfg.num_classes
    d = cfg.decoder_width
    if cfg.kind == "cnn":
        widths = _cnn_widths(cfg)
        cin = cfg.in_channels
        if cfg.depth == 2:
            conv("stem", cin, widths[0], 3)
            norm("stem.n", widths[0])
            cin = widths[0]
        for k, w in enumerate(widths):
            conv(f"enc{k}", cin, w, 3)
            norm(f"enc{k}.n", w)
            cin = w
        for k in range(1, cfg.depth):
            conv(f"lat{k}", widths[k], d, 1, bias=True)
        conv("smooth", d, d, 3)
        norm("smooth.n", d)
        conv("cls", d, L, 1, bias=True)
    else:
        c = cfg.width
        linear("embed", cfg.in_channels * 16, c)
        conv("pos", c, c, 3, bias=True)
        for s in (1, 2):
            if s == 2:
                params["merge.n.g"] = _ones((4 * c,))
                params["merge.n.b"] = _zeros((4 * c,))
                linear("merge", 4 * c, c)
            params[f"blk{s}.n1.g"] = _ones((c,))
            params[f"blk{s}.n1.b"] = _zeros((c,))
            linear(f"blk{s}.qkv", c, 3 * c)
            linear(f"blk{s}.proj", c, c)
            params[f"blk{s}.n2.g"] = _ones((c,))
            params[f"blk{s}.n2.b"] = _zeros((c,))
            linear(f"blk{s}.fc1", c, 2 * c)
            linear(f"blk{s}.fc2", 2 * c, c)
            params[f"out{s}.n.g"] = _ones((c,))
            params[f"out{s}.n.b"] = _zeros((c,))
            linear(f"dec{s}", c, d)
        linear("fuse", 2 * d, d, gain=6.0)
        linear("cls", d, L)
    return Student(cfg, params, buffers)


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def _check_input(x: Tensor) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ValueError(f"input size {x.shape[2:]} must be divisible by 8")


# ---------------------------------------------------------------------------
# CNN student
# ---------------------------------------------------------------------------


def _batch_norm(params, buffers, name, x, train):
    g = params[f"{name}.g"].reshape(1, -1, 1, 1)
    b = params[f"{name}.b"].reshape(1, -1, 1, 1)
    if train:
        xhat, mu, var = T.normalize_with_stats(x, (0, 2, 3), NORM_EPS)
        if buffers is not None and f"{name}.mean" in buffers:
            n = x.size / x.shape[1]
            var = var * n / max(n - 1, 1)
            buffers[f"{name}.mean"] = (1 - BN_MOMENTUM) * buffers[f"{name}.mean"] + BN_MOMENTUM * mu
            buffers[f"{name}.var"] = (1 - BN_MOMENTUM) * buffers[f"{name}.var"] + BN_MOMENTUM * var
    else:
        mu = buffers[f"{name}.mean"].reshape(1, -1, 1, 1)
        inv = 1.0 / np.sqrt(buffers[f"{name}.var"].reshape(1, -1, 1, 1) + NORM_EPS)
        xhat = (x - mu) * inv
    return xhat * g + b


def _conv_block(params, buffers, name, x, stride, train):
    y = T.conv2d(x, params[f"{name}.w"], stride=stride, pad=1)
    return T.relu(_batch_norm(params, buffers, f"{name}.n", y, train))


def _conv1x1(params, name, x):
    return T.conv2d(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _head(params, feat: Tensor, h: int, w: int) -> Tensor:
    logits = T.bilinear_upsample(_conv1x1(params, "cls", feat), h, w)
    return T.softmax(logits, axis=1)


def cnn_forward(params: Params, x, buffers: Optional[Buffers] = None, train: bool = True) -> StudentOutput:
    x = T.as_tensor(x)
    _check_input(x)
    h, w = x.shape[2:]
    if "stem.w" in params:
        x = _conv_block(params, buffers, "stem", x, 2, train)
    feats = []
    k = 0
    while f"enc{k}.w" in params:
        x = _conv_block(params, buffers, f"enc{k}", x, 2, train)
        feats.append(x)
        k += 1
    top = _conv1x1(params, f"lat{k - 1}", feats[-1])
    for j in range(k - 2, 0, -1):
        lat = _conv1x1(params, f"lat{j}", feats[j])
        top = lat + T.bilinear_upsample(top, *lat.shape[2:])
    if top.shape[2] != h // 4:
        top = T.bilinear_upsample(top, h // 4, w // 4)
    f_d = _conv_block(params, buffers, "smooth", top, 1, train)
    return StudentOutput(P=_head(params, f_d, h, w), F_E=feats[-1], F_D=f_d)


# ---------------------------------------------------------------------------
# transformer student
# ---------------------------------------------------------------------------


def _linear(params, name, x):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _layer_norm(params, name, x):
    return T.normalize(x, axes=(-1,), eps=NORM_EPS) * params[f"{name}.g"] + params[f"{name}.b"]


def _attention_block(params, name, x, heads, keep):
    n, t, c = x.shape
    dh = c // heads
    qkv = _linear(params, f"{name}.qkv", _layer_norm(params, f"{name}.n1", x))
    qkv = qkv.reshape(n, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if keep is not None:
        keep.append(attn.data)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, c)
    x = x + _linear(params, f"{name}.proj", ctx)
    hid = T.gelu(_linear(params, f"{name}.fc1", _layer_norm(params, f"{name}.n2", x)))
    return x + _linear(params, f"{name}.fc2", hid)


def _tokens_to_map(tok: Tensor, h: int, w: int) -> Tensor:
    n, _, c = tok.shape
    return tok.transpose(0, 2, 1).reshape(n, c, h, w)


def _map_to_tokens(m: Tensor) -> Tensor:
    n, c, h, w = m.shape
    return m.reshape(n, c, h * w).transpose(0, 2, 1)


def transformer_forward(
    params: Params,
    x,
    cfg: Optional[StudentConfig] = None,
    train: bool = True,
    keep_attention: bool = False,
) -> StudentOutput:
    x = T.as_tensor(x)
    _check_input(x)
    heads = cfg.attention_heads if cfg is not None else 2
    n, cin, h, w = x.shape
    h4, w4, h8, w8 = h // 4, w // 4, h // 8, w // 8
    keep = [] if keep_attention else None

    # 4x4 non-overlapping patches -> tokens at H/4
    patches = x.reshape(n, cin, h4, 4, w4, 4).transpose(0, 2, 4, 1, 3, 5).reshape(n, h4 * w4, cin * 16)
    tok = _linear(params, "embed", patches)
    grid = _tokens_to_map(tok, h4, w4)
    grid = grid + T.conv2d(grid, params["pos.w"], pad=1) + params["pos.b"]
    tok = _map_to_tokens(grid)

    tok = _attention_block(params, "blk1", tok, heads, keep)
    out1 = _layer_norm(params, "out1.n", tok)

    # 2x2 token merging -> H/8
    c = out1.shape[-1]
    merged = out1.reshape(n, h8, 2, w8, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h8 * w8, 4 * c)
    tok2 = _linear(params, "merge", _layer_norm(params, "merge.n", merged))
    tok2 = _attention_block(params, "blk2", tok2, heads, keep)
    out2 = _layer_norm(params, "out2.n", tok2)

    d1 = _tokens_to_map(_linear(params, "dec1", out1), h4, w4)
    d2 = T.bilinear_upsample(_tokens_to_map(_linear(params, "dec2", out2), h8, w8), h4, w4)
    cat = _map_to_tokens(T.concat([d1, d2], axis=1))
    fused = T.relu(_linear(params, "fuse", cat))
    f_d = _tokens_to_map(fused, h4, w4)

    logits = _tokens_to_map(_linear(params, "cls", fused), h4, w4)
    P = T.softmax(T.bilinear_upsample(logits, h, w), axis=1)
    return StudentOutput(P=P, F_E=_tokens_to_map(out2, h8, w8), F_D=f_d, attention=keep or [])
