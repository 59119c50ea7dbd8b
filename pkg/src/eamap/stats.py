"""Per-weight attention statistics: histogram banks, entropy, mean and KL maps.

A :class:`HistogramBank` keeps, for every attention weight ``(l, h, i, j)``,
a ``2**bits``-bin histogram of the values seen over the calibration images
and an exact running sum of those values (for the mean map).

The running sum is stored as a few float64 "limbs" on fixed power-of-two
grids. Each limb sum is exact for up to ``MAX_IMAGES`` images, so addition is
associative and a bank merged from shards is byte-identical to one filled
sequentially, while a single recorded float32 map is still recovered exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .binio import Reader, Writer
from .errors import (
    CounterOverflowError,
    DimensionError,
    EmptyCalibrationError,
    FormatError,
    RangeError,
)

MAGIC = b"EAMS"
VERSION = 1
LIMBS = 5
LIMB_BITS = 32
MAX_IMAGES = 2**20
RANGE_SLACK = 1e-6
_U32_MAX = np.iinfo(np.uint32).max


def bin_index(value, bits: int = 8):
    """Histogram bin of attention value(s) in [0, 1]: ``floor(v * 2**bits)``, 1.0 in the top bin."""
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < -RANGE_SLACK) or np.any(v > 1 + RANGE_SLACK) or not np.all(np.isfinite(v)):
        raise RangeError("attention values must lie in [0, 1]")
    nb = 2**bits
    idx = np.clip(np.floor(v * nb), 0, nb - 1).astype(np.int64)
    return int(idx) if idx.ndim == 0 else idx


def _split_limbs(v: np.ndarray) -> np.ndarray:
    out = np.empty((LIMBS,) + v.shape, dtype=np.float64)
    r = v.astype(np.float64)
    for k in range(LIMBS):
        g = 2.0 ** (LIMB_BITS * (k + 1))
        out[k] = np.rint(r * g) / g
        r = r - out[k]
    return out


@dataclass
class HistogramBank:
    bits: int
    counts: np.ndarray  # uint32, (L, H, T, T, 2**bits)
    sums: np.ndarray  # float64, (LIMBS, L, H, T, T)
    images: int = 0

    @classmethod
    def zeros(cls, shape: Sequence[int], bits: int = 8) -> "HistogramBank":
        if not 1 <= bits <= 16:
            raise ValueError(f"histogram bits must be in [1, 16], got {bits}")
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4:
            raise DimensionError(f"bank shape must be (L, H, T, T), got {shape}")
        return cls(
            bits,
            np.zeros(shape + (2**bits,), dtype=np.uint32),
            np.zeros((LIMBS,) + shape, dtype=np.float64),
            0,
        )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.counts.shape[:4])

    @property
    def num_bins(self) -> int:
        return 2**self.bits

    def copy(self) -> "HistogramBank":
        return HistogramBank(self.bits, self.counts.copy(), self.sums.copy(), self.images)

    def accumulate(self, record: np.ndarray) -> "HistogramBank":
        """Add one image's ``(L, H, T, T)`` attention record (or a stacked batch)."""
        rec = np.asarray(record)
        if rec.shape == self.shape:
            rec = rec[None]
        if rec.shape[1:] != self.shape:
            raise DimensionError(f"record shape {rec.shape[1:]} does not match bank {self.shape}")
        n = rec.shape[0]
        if self.images + n > MAX_IMAGES:
            raise CounterOverflowError(
                f"bank would exceed {MAX_IMAGES} images; merge smaller banks offline"
            )
        bins = bin_index(rec, self.bits)
        nb = self.num_bins
        flat = (np.arange(int(np.prod(self.shape)), dtype=np.int64) * nb).reshape(self.shape)
        view = self.counts.reshape(-1)
        if n == 1:
            # one record touches every weight exactly once
            pos = (flat + bins[0]).ravel()
            if int(view[pos].max()) >= _U32_MAX:
                raise CounterOverflowError("histogram counter saturated")
            view[pos] += np.uint32(1)
        elif n:
            inc = np.bincount((flat[None] + bins).ravel(), minlength=self.counts.size)
            if int(view.max()) + int(inc.max()) > _U32_MAX:
                raise CounterOverflowError("histogram counter saturated")
            view += inc.astype(np.uint32)
        for m in range(n):
            self.sums += _split_limbs(rec[m])
        self.images += n
        return self

    def merge(self, other: "HistogramBank") -> "HistogramBank":
        return merge(self, other)

    def tap(self) -> "BankTap":
        return BankTap(self)


class BankTap:
    """Forward-pass attention tap that feeds every image's maps into a bank."""

    def __init__(self, bank: HistogramBank) -> None:
        self.bank = bank
        self._layers: dict[int, np.ndarray] = {}

    def __call__(self, layer: int, a: np.ndarray) -> None:
        self._layers[layer] = a
        if len(self._layers) == self.bank.shape[0]:
            record = np.stack([self._layers[l] for l in range(self.bank.shape[0])], axis=1)
            self._layers.clear()
            self.bank.accumulate(record)


def merge(a: HistogramBank, b: HistogramBank) -> HistogramBank:
    """Elementwise sum of two banks (associative and commutative)."""
    if a.bits != b.bits or a.shape != b.shape:
        raise DimensionError(
            f"cannot merge banks with bits/shape {a.bits}/{a.shape} and {b.bits}/{b.shape}"
        )
    total = a.counts.astype(np.uint64) + b.counts.astype(np.uint64)
    if total.size and int(total.max()) > _U32_MAX:
        raise CounterOverflowError("histogram counter saturated during merge")
    if a.images + b.images > MAX_IMAGES:
        raise CounterOverflowError(f"merged bank would exceed {MAX_IMAGES} images")
    return HistogramBank(a.bits, total.astype(np.uint32), a.sums + b.sums, a.images + b.images)


def _require_images(bank: HistogramBank) -> None:
    if bank.images < 1:
        raise EmptyCalibrationError("bank holds no calibration images")


def entropy_terms(images: int) -> np.ndarray:
    """``t[c] = -(c/M) log2(c/M)`` for every count ``c`` in ``0..M``."""
    t = np.zeros(images + 1, dtype=np.float64)
    for c in range(1, images + 1):
        p = c / images
        t[c] = -(p * math.log2(p))
    return t


def entropy_map(bank: HistogramBank) -> np.ndarray:
    """Shannon entropy (bits) of every weight's histogram, shape ``(L, H, T, T)``.

    Terms are added in ascending bin order.
    """
    _require_images(bank)
    table = entropy_terms(bank.images)
    h = np.zeros(bank.shape, dtype=np.float64)
    for k in range(bank.num_bins):
        h += table[bank.counts[..., k]]
    # guard against last-ulp overshoot of the log2(2**b) ceiling
    return np.minimum(h, float(bank.bits))


def mean_map(bank: HistogramBank) -> np.ndarray:
    """Mean attention map per (layer, head), float64 ``(L, H, T, T)``."""
    _require_images(bank)
    total = bank.sums[0].copy()
    for k in range(1, LIMBS):
        total += bank.sums[k]
    return total / bank.images


@dataclass
class DivergenceMap:
    values: np.ndarray  # (L, H, T, T) bits
    head_mean: np.ndarray  # (L, H)
    head_max: np.ndarray
    cls_mean: np.ndarray  # (L, H), CLS query row only
    cls_max: np.ndarray


def kl_map(p_bank: HistogramBank, q_bank: HistogramBank) -> DivergenceMap:
    """Per-weight ``KL(p || q)`` in bits between two banks' histograms.

    A ``q`` bin that is empty where ``p`` is not gets probability
    ``1 / (M_q * 2**bits)``; that weight's ``q`` is then rescaled to sum to 1
    so the divergence stays non-negative. Weights needing no floor are left
    untouched, which keeps ``KL(p || p)`` exactly zero.
    """
    if p_bank.bits != q_bank.bits or p_bank.shape != q_bank.shape:
        raise DimensionError("KL needs banks with identical bits and shape")
    _require_images(p_bank)
    _require_images(q_bank)
    floor = 1.0 / (q_bank.images * q_bank.num_bins)
    p = p_bank.counts / float(p_bank.images)
    q = q_bank.counts / float(q_bank.images)
    hole = (p > 0) & (q == 0)
    n_holes = hole.sum(axis=-1, keepdims=True)
    q = np.where(hole, floor, q)
    q = np.where(n_holes > 0, q / (1.0 + n_holes * floor), q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p / q), 0.0)
    # rounding can leave a -1 ulp residue on near-identical histograms
    values = np.maximum(terms.sum(axis=-1), 0.0)
    return DivergenceMap(
        values=values,
        head_mean=values.mean(axis=(2, 3)),
        head_max=values.max(axis=(2, 3)),
        cls_mean=values[:, :, 0, :].mean(axis=-1),
        cls_max=values[:, :, 0, :].max(axis=-1),
    )


def calibration_indices(n: int, fraction: float, seed: int = 0) -> np.ndarray:
    """First ``ceil(fraction * n)`` positions of a seeded permutation of ``range(n)``."""
    if not 0 < fraction <= 1:
        raise ValueError(f"calibration fraction must be in (0, 1], got {fraction}")
    m = math.ceil(round(fraction * n, 9))
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return perm[:m]


def collect_bank(
    images: np.ndarray,
    params,
    cfg,
    bits: int = 8,
    quant=None,
    chunk: int = 1,
) -> HistogramBank:
    """Fill a fresh bank by running the model over ``images`` (already normalised)."""
    from .vit.model import forward

    bank = HistogramBank.zeros(cfg.attention_shape, bits)
    tap = bank.tap()
    for start in range(0, len(images), chunk):
        forward(images[start : start + chunk], params, cfg, quant=quant, tap=tap)
    return bank


def _collect_worker(args):
    images, params, cfg, bits, quant = args
    return collect_bank(images, params, cfg, bits, quant)


def run_calibration(
    images: np.ndarray,
    params,
    cfg,
    bits: int = 8,
    quant=None,
    workers: int = 1,
) -> HistogramBank:
    """Calibrate a bank over ``images``, optionally sharded across worker processes.

    Each image is forwarded on its own so its attention maps do not depend on
    batch composition; shards are merged in order.
    """
    if len(images) == 0:
        raise EmptyCalibrationError("calibration set is empty")
    if workers <= 1:
        return collect_bank(images, params, cfg, bits, quant)
    shards = np.array_split(np.arange(len(images)), workers)
    jobs = [(images[s], params, cfg, bits, quant) for s in shards if len(s)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        banks = list(pool.map(_collect_worker, jobs))
    out = banks[0]
    for b in banks[1:]:
        out = merge(out, b)
    return out


# --- serialisation -------------------------------------------------------


def dumps_bank(bank: HistogramBank) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.pack("I", bank.bits)
    w.pack("Q", bank.images)
    w.pack("4Q", *bank.shape)
    w.pack("I", LIMBS)
    w.array(bank.counts, "u4")
    w.array(bank.sums, "f8")
    return w.getvalue()


def loads_bank(data: bytes) -> HistogramBank:
    r = Reader(data, "stats bank")
    r.header(MAGIC, VERSION)
    (bits,) = r.unpack("I", "bits")
    (images,) = r.unpack("Q", "image count")
    shape = r.unpack("4Q", "dims")
    (limbs,) = r.unpack("I", "limb count")
    if limbs != LIMBS or not 1 <= bits <= 16:
        raise FormatError(f"stats bank: unsupported layout (bits={bits}, limbs={limbs})")
    counts = r.array("u4", tuple(shape) + (2**bits,), "counters")
    sums = r.array("f8", (LIMBS,) + tuple(shape), "mean accumulators")
    if not r.at_end():
        raise FormatError("stats bank: trailing bytes")
    return HistogramBank(bits, counts, sums, images)


def save_bank(bank: HistogramBank, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps_bank(bank))


def load_bank(path: Union[str, Path]) -> HistogramBank:
    return loads_bank(Path(path).read_bytes())
