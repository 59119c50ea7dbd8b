"""Datasets: IDX (MNIST-format) files and a procedurally rendered shapes task."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import CountMismatchError, MagicError, TruncationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES_RGB_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801

SHAPE_KINDS = (
    "square",
    "circle",
    "plus",
    "triangle",
    "frame",
    "ring",
    "hbar",
    "vbar",
    "cross",
    "diamond",
)


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (n, H, W, C)
    labels: np.ndarray  # int64 (n,)
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be uint8 with shape (n, H, W, C)")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def _open(path: Union[str, Path]) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(raw: bytes, expected: Sequence[int], what: str):
    if len(raw) < 4:
        raise TruncationError(f"{what}: truncated header at byte offset {len(raw)}", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in expected:
        raise MagicError(f"{what}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise TruncationError(f"{what}: truncated header at byte offset {len(raw)}", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:hdr])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - hdr
    if have < need:
        raise TruncationError(
            f"{what}: truncated payload at byte offset {len(raw)} "
            f"(expected {hdr + need} bytes)",
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, split: str = "all") -> Dataset:
    """Read an IDX image file and its IDX label file (optionally gzipped)."""
    images = _read_idx(_open(images_path), (IDX_IMAGES_MAGIC, IDX_IMAGES_RGB_MAGIC), "IDX images")
    labels = _read_idx(_open(labels_path), (IDX_LABELS_MAGIC,), "IDX labels")
    if len(images) != len(labels):
        raise CountMismatchError(f"IDX count mismatch: {len(images)} images vs {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images.copy(), labels.astype(np.int64), num_classes, split)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    n, H, W, C = ds.images.shape
    if C == 1:
        head = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, H, W)
        body = ds.images[..., 0]
    else:
        head = struct.pack(">IIIII", IDX_IMAGES_RGB_MAGIC, n, H, W, C)
        body = ds.images
    if ds.labels.size and ds.labels.max() > 255:
        raise ValueError("IDX label files hold unsigned bytes")
    for path, data in (
        (images_path, head + np.ascontiguousarray(body).tobytes()),
        (labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()),
    ):
        path = Path(path)
        path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    image_size: int = 28
    samples_per_class: int = 100
    noise: float = 0.2
    seed: int = 0
    min_scale: float = 0.22
    max_scale: float = 0.36
    jitter: float = 0.15

    def __post_init__(self):
        if not 2 <= self.classes <= len(SHAPE_KINDS):
            raise ValueError(f"classes must be in [2, {len(SHAPE_KINDS)}]")
        if self.samples_per_class < 1 or self.image_size < 8:
            raise ValueError("need samples_per_class >= 1 and image_size >= 8")


def _render(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    coords = np.arange(size) + 0.5
    dx = coords[None, :] - cx
    dy = coords[:, None] - cy
    ax, ay = np.abs(dx), np.abs(dy)
    t = max(1.0, r / 3.5)
    if kind == "square":
        m = (ax <= r) & (ay <= r)
    elif kind == "circle":
        m = dx * dx + dy * dy <= r * r
    elif kind == "plus":
        m = ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    elif kind == "triangle":
        m = (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2)
    elif kind == "frame":
        w = max(1.5, r / 3)
        m = (ax <= r) & (ay <= r) & ~((ax <= r - w) & (ay <= r - w))
    elif kind == "ring":
        d2 = dx * dx + dy * dy
        w = max(1.5, r / 3)
        m = (d2 <= r * r) & (d2 >= (r - w) ** 2)
    elif kind == "hbar":
        m = (ay <= t) & (ax <= r)
    elif kind == "vbar":
        m = (ax <= t) & (ay <= r)
    elif kind == "cross":
        m = ((np.abs(dx - dy) <= 1.4 * t) | (np.abs(dx + dy) <= 1.4 * t)) & (ax <= r) & (ay <= r)
    elif kind == "diamond":
        m = ax + ay <= r
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m.astype(np.float64)


def generate_shapes(spec: SyntheticSpec) -> Dataset:
    """Class-balanced grayscale shapes with jittered position and size plus uniform noise.

    Sample ``i`` has label ``i % classes``; identical specs give identical bytes.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    S = spec.image_size
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, S, S, 1), dtype=np.uint8)
    labels = np.arange(n, dtype=np.int64) % spec.classes
    for i in range(n):
        r = rng.uniform(spec.min_scale, spec.max_scale) * S
        # centre offset of at most jitter * S, kept inside the canvas
        lo, hi = max(r + 1, S / 2 - spec.jitter * S), min(S - r - 1, S / 2 + spec.jitter * S)
        cx = rng.uniform(lo, hi)
        cy = rng.uniform(lo, hi)
        intensity = rng.uniform(0.6, 1.0)
        img = _render(SHAPE_KINDS[labels[i]], S, cx, cy, r) * intensity
        if spec.noise > 0:
            img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        images[i, :, :, 0] = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return Dataset(images, labels, spec.classes, "all")


def train_test_split(ds: Dataset, test_fraction: float, seed: int = 0):
    """Seeded split that keeps every class's share (per-class permutation)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        test_idx.append(idx[: int(round(test_fraction * len(idx)))])
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
    train = np.setdiff1d(np.arange(len(ds)), test)
    return ds.subset(train, "train"), ds.subset(test, "test")


@dataclass(frozen=True)
class Normalization:
    """Per-channel standardisation applied after scaling pixels to [0, 1]."""

    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalization":
        x = ds.images.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(np.float32(m)) for m in mean), tuple(float(np.float32(s)) for s in std))

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float32) / np.float32(255.0)
        return (x - np.asarray(self.mean, np.float32)) / np.asarray(self.std, np.float32)


def to_float(images: np.ndarray, normalize: Optional[Normalization] = None) -> np.ndarray:
    if normalize is None:
        return images.astype(np.float32) / np.float32(255.0)
    return normalize.apply(images)


def batches(
    ds: Dataset,
    batch_size: int,
    seed: Optional[int] = 0,
    normalize: Optional[Normalization] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded-shuffled float batches; the last partial batch is kept.

    ``seed=None`` keeps dataset order. Without ``normalize`` pixels are
    scaled into [0, 1].
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if seed is None else np.random.Generator(np.random.PCG64(seed)).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield to_float(ds.images[idx], normalize), ds.labels[idx]


def spec_to_text(spec: SyntheticSpec) -> str:
    return "".join(f"{k}={getattr(spec, k)}\n" for k in spec.__dataclass_fields__)


def spec_from_text(text: str) -> SyntheticSpec:
    kwargs = {}
    types = {k: f.type for k, f in SyntheticSpec.__dataclass_fields__.items()}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ValueError(f"unknown synthetic spec key {key!r}")
        kwargs[key] = float(value) if types[key] in ("float", float) else int(value)
    return SyntheticSpec(**kwargs)
