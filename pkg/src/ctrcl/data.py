"""Synthetic multi-class shape segmentation data, the CTRS file format, augmentation, batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

MAGIC = b"CTRS"
VERSION = 1
HEADER = struct.Struct("<4sHIHHH")  # magic, version, num_samples, H, W, L -> 16 bytes

NOISE_SIGMA = 0.05
MIN_FRAC, MAX_FRAC = 0.01, 0.40

# class colours: every pair differs by >= 0.3 in Euclidean RGB distance
PALETTE = np.array(
    [
        (0.78, 0.42, 0.40),
        (0.42, 0.76, 0.44),
        (0.42, 0.45, 0.80),
        (0.80, 0.78, 0.38),
        (0.78, 0.40, 0.78),
        (0.40, 0.78, 0.78),
        (0.30, 0.30, 0.30),
    ]
)
SHAPE_KINDS = ("ellipse", "rectangle", "annulus")


@dataclass
class Shape:
    kind: str
    cy: float
    cx: float
    a: float  # semi-axis / half-width / outer radius
    b: float  # semi-axis / half-height / inner radius
    angle: float = 0.0

    def contains(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        dy, dx = y - self.cy, x - self.cx
        if self.kind == "annulus":
            r2 = dx * dx + dy * dy
            return (r2 <= self.a * self.a) & (r2 >= self.b * self.b)
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        if self.kind == "ellipse":
            return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0
        return (np.abs(u) <= self.a) & (np.abs(v) <= self.b)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    labels: np.ndarray  # H x W uint8
    shapes: dict = field(default_factory=dict)  # class id -> Shape


@dataclass
class SegDataset:
    images: np.ndarray  # N x 3 x H x W float32
    labels: np.ndarray  # N x H x W uint8
    num_classes: int

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], num_classes: int) -> "SegDataset":
        return cls(
            np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]).astype(np.uint8),
            num_classes,
        )

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], self.labels[i])


def pixel_grid(H: int, W: int):
    """Pixel-centre coordinates ``(y, x)``."""
    return np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")


def render_labels(shapes: dict, H: int, W: int, coords=None) -> np.ndarray:
    y, x = pixel_grid(H, W) if coords is None else coords
    labels = np.zeros((H, W), dtype=np.uint8)
    for cls, shape in shapes.items():
        labels[shape.contains(y, x)] = cls
    return labels


def _random_shape(rng, kind: str, H: int, W: int) -> Shape:
    side = min(H, W)
    cy, cx = rng.uniform(0.15 * H, 0.85 * H), rng.uniform(0.15 * W, 0.85 * W)
    angle = rng.uniform(0, math.pi)
    if kind == "annulus":
        outer = rng.uniform(0.12, 0.3) * side
        return Shape(kind, cy, cx, outer, outer * rng.uniform(0.4, 0.7))
    if kind == "ellipse":
        return Shape(kind, cy, cx, rng.uniform(0.08, 0.3) * side, rng.uniform(0.08, 0.3) * side, angle)
    return Shape(kind, cy, cx, rng.uniform(0.06, 0.25) * side, rng.uniform(0.06, 0.25) * side, angle)


def _make_sample(rng, H: int, W: int, L: int) -> Sample:
    y, x = pixel_grid(H, W)
    while True:
        k = int(rng.integers(1, L))
        classes = sorted(int(c) for c in rng.choice(np.arange(1, L), size=k, replace=False))
        occupied = np.zeros((H, W), dtype=bool)
        shapes = {}
        for cls in classes:
            kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
            for _ in range(200):
                shape = _random_shape(rng, kind, H, W)
                m = shape.contains(y, x)
                frac = m.mean()
                # one-pixel gap keeps shapes from touching
                grown = m.copy()
                grown[1:] |= m[:-1]
                grown[:-1] |= m[1:]
                grown[:, 1:] |= m[:, :-1]
                grown[:, :-1] |= m[:, 1:]
                if MIN_FRAC <= frac <= MAX_FRAC and not (grown & occupied).any():
                    shapes[cls] = shape
                    occupied |= m
                    break
        if shapes:
            break

    labels = render_labels(shapes, H, W, (y, x))
    lo = rng.uniform(0.3, 0.7, size=3)
    hi = rng.uniform(0.3, 0.7, size=3)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = ((y - H / 2) * math.sin(theta) + (x - W / 2) * math.cos(theta)) / max(H, W) + 0.5
    image = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]
    for cls in shapes:
        image[:, labels == cls] = PALETTE[(cls - 1) % len(PALETTE)][:, None]
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, labels, shapes)


def generate_synthetic(num: int, H: int = 64, W: int = 64, L: int = 4, seed: int = 0) -> List[Sample]:
    """Deterministic images of non-overlapping ellipses, rectangles and annuli."""
    if not 2 <= L <= 8:
        raise ValueError("L must lie in [2, 8]")
    if H <= 0 or W <= 0 or H % 8 or W % 8:
        raise ValueError("H and W must be positive multiples of 8")
    if num < 0:
        raise ValueError("num must be non-negative")
    rng = np.random.default_rng(seed)
    return [_make_sample(rng, H, W, L) for _ in range(num)]


def make_dataset(num: int, H: int = 64, W: int = 64, L: int = 4, seed: int = 0) -> SegDataset:
    return SegDataset.from_samples(generate_synthetic(num, H, W, L, seed), L) if num else SegDataset(
        np.zeros((0, 3, H, W), np.float32), np.zeros((0, H, W), np.uint8), L
    )


# ---------------------------------------------------------------------------
# CTRS file format
# ---------------------------------------------------------------------------


def expected_file_size(n: int, H: int, W: int) -> int:
    return HEADER.size + n * 3 * H * W * 4 + n * H * W


def save_dataset(path: Union[str, Path], d: SegDataset) -> None:
    n = len(d)
    H, W = d.images.shape[2:] if n else d.labels.shape[1:]
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, H, W, d.num_classes))
        fh.write(np.ascontiguousarray(d.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(d.labels, dtype=np.uint8).tobytes())


def load_dataset(path: Union[str, Path]) -> SegDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, H, W, L = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(raw) != expected_file_size(n, H, W):
        raise ValueError(f"{path}: expected {expected_file_size(n, H, W)} bytes, found {len(raw)}")
    off = HEADER.size
    images = np.frombuffer(raw, dtype="<f4", count=n * 3 * H * W, offset=off).reshape(n, 3, H, W)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=off + images.nbytes).reshape(n, H, W)
    return SegDataset(images.astype(np.float32), labels.copy(), int(L))


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1]


def rot90(a: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(a, k, axes=(-2, -1))


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip (p=0.5), then a random k*90 degree rotation (p=0.5).

    Rotation is skipped for non-square images; the draws are made either
    way so the random stream does not depend on image shape.
    """
    image, labels = s.image, s.labels
    if rng.random() < 0.5:
        image, labels = hflip(image), hflip(labels)
    rotate = rng.random() < 0.5
    k = int(rng.integers(1, 4))
    if rotate and image.shape[-1] == image.shape[-2]:
        image, labels = rot90(image, k), rot90(labels, k)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(labels))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def batch_iter(
    d: SegDataset,
    batch_size: int,
    shuffle_seed: Optional[int] = 0,
    epoch: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[Batch]:
    """Epoch-seeded shuffled batches, last partial batch kept.

    ``shuffle_seed=None`` keeps dataset order.  When ``rng`` is given every
    sample is passed through :func:`augment` with it.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(d) == 0:
        raise ValueError("empty dataset")
    if shuffle_seed is None:
        order = np.arange(len(d))
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start : start + batch_size]
        if rng is None:
            yield Batch(d.images[idx], d.labels[idx], idx)
            continue
        aug = [augment(d.sample(i), rng) for i in idx]
        yield Batch(np.stack([a.image for a in aug]), np.stack([a.labels for a in aug]), idx)
