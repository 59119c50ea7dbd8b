"""Attention-weight fixing: pick low-entropy weights and freeze them to their means.

A :class:`FixPlan` holds boolean masks over every attention weight
``(l, h, i, j)`` and the values those weights are frozen to. Applying it to a
post-softmax attention map replaces masked entries and leaves the rest alone;
rows are not renormalised unless asked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .binio import Reader, Writer
from .errors import DimensionError, FormatError
from .quant import FULL_PRECISION, quantize_frozen_attention
from .stats import HistogramBank, mean_map

GLOBAL = "global"
PER_HEAD = "per-head"
SCOPES = (GLOBAL, PER_HEAD)
ENTROPY = "entropy"
RANDOM = "random"

MAGIC = b"EAMP"
VERSION = 1


def fixed_count(tau: float, total: int) -> int:
    """``floor(tau * total)`` evaluated on the decimal value of ``tau``."""
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return math.floor(Fraction(repr(float(tau))) * total)


def _lowest(values: np.ndarray, k: int):
    """Mask of the ``k`` smallest entries (ties by flat index) and the threshold."""
    flat = values.reshape(-1)
    order = np.argsort(flat, kind="stable")
    mask = np.zeros(flat.shape, dtype=bool)
    mask[order[:k]] = True
    eps = float(flat[order[k]]) if k < flat.size else math.inf
    return mask.reshape(values.shape), eps


def select_threshold(entropy: np.ndarray, tau: float, scope: str = GLOBAL):
    """Choose the weights to fix. Returns ``(epsilon, mask)``.

    ``epsilon`` is the entropy of the first weight left unfixed (``inf`` when
    everything is fixed): every fixed weight has entropy <= epsilon and every
    unfixed one >= epsilon, and the mask settles ties by ascending
    ``(l, h, i, j)`` so exactly ``floor(tau * W)`` weights are fixed. For the
    per-head scope ``epsilon`` is an ``(L, H)`` array.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    if entropy.ndim != 4:
        raise DimensionError(f"entropy map must be (L, H, T, T), got {entropy.shape}")
    if scope == GLOBAL:
        mask, eps = _lowest(entropy, fixed_count(tau, entropy.size))
        return np.float64(eps), mask
    if scope == PER_HEAD:
        L, H = entropy.shape[:2]
        k = fixed_count(tau, entropy.shape[2] * entropy.shape[3])
        mask = np.zeros(entropy.shape, dtype=bool)
        eps = np.zeros((L, H))
        for l in range(L):
            for h in range(H):
                mask[l, h], eps[l, h] = _lowest(entropy[l, h], k)
        return eps, mask
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


@dataclass(frozen=True)
class FixPlan:
    tau: float
    epsilon: np.ndarray  # () for global scope, (L, H) per head
    masks: np.ndarray  # bool (L, H, T, T), True = fixed
    frozen_values: np.ndarray  # float32 (L, H, T, T)
    scope: str = GLOBAL
    provenance: str = ENTROPY
    seed: int = 0
    frozen_bits: int = FULL_PRECISION
    renormalize: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.masks.shape != self.frozen_values.shape or self.masks.ndim != 4:
            raise DimensionError("plan masks and frozen values must share an (L, H, T, T) shape")

    @property
    def shape(self):
        return self.masks.shape

    @property
    def num_fixed(self) -> int:
        return int(self.masks.sum())

    @property
    def fixed_fraction(self) -> float:
        return self.num_fixed / self.masks.size

    def with_renormalize(self, flag: bool = True) -> "FixPlan":
        return replace(self, renormalize=flag)

    def apply_layer(self, a: np.ndarray, layer: int) -> np.ndarray:
        """Fix a ``(..., H, T, T)`` stack of maps from ``layer``."""
        mask = self.masks[layer]
        if not mask.any():
            return a
        out = np.where(mask, self.frozen_values[layer].astype(a.dtype, copy=False), a)
        return _renormalize(out) if self.renormalize else out


def _renormalize(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=-1, keepdims=True)
    return np.where(s > 0, a / np.where(s > 0, s, 1), a)


def apply_fixing(a: np.ndarray, plan: FixPlan, layer: int, head: int, renormalize: bool = False) -> np.ndarray:
    """Replace the masked entries of one head's ``(T, T)`` map with their frozen values."""
    mask = plan.masks[layer, head]
    if a.shape[-2:] != mask.shape:
        raise DimensionError(f"attention map {a.shape} does not match plan {mask.shape}")
    out = np.where(mask, plan.frozen_values[layer, head].astype(a.dtype, copy=False), a)
    return _renormalize(out) if renormalize else out


def frozen_means(bank: HistogramBank, frozen_bits: int) -> np.ndarray:
    return quantize_frozen_attention(mean_map(bank), frozen_bits).astype(np.float32)


def build_plan(
    entropy: np.ndarray,
    bank: HistogramBank,
    tau: float,
    scope: str = GLOBAL,
    frozen_bits: int = FULL_PRECISION,
) -> FixPlan:
    """Fix the ``tau`` fraction of lowest-entropy weights to their (quantised) means."""
    if tuple(entropy.shape) != bank.shape:
        raise DimensionError(f"entropy map {entropy.shape} does not match bank {bank.shape}")
    eps, mask = select_threshold(entropy, tau, scope)
    return FixPlan(
        tau=float(tau),
        epsilon=np.asarray(eps, dtype=np.float64),
        masks=mask,
        frozen_values=frozen_means(bank, frozen_bits),
        scope=scope,
        provenance=ENTROPY,
        seed=0,
        frozen_bits=frozen_bits,
    )


def random_mask(shape, tau: float, seed: int, scope: str = GLOBAL) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    if scope == GLOBAL:
        total = int(np.prod(shape))
        mask = np.zeros(total, dtype=bool)
        mask[rng.choice(total, fixed_count(tau, total), replace=False)] = True
        return mask.reshape(shape)
    if scope == PER_HEAD:
        L, H, T, _ = shape
        k = fixed_count(tau, T * T)
        mask = np.zeros((L, H, T * T), dtype=bool)
        for l in range(L):
            for h in range(H):
                mask[l, h, rng.choice(T * T, k, replace=False)] = True
        return mask.reshape(shape)
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def random_plan(
    shape,
    bank: HistogramBank,
    tau: float,
    seed: int,
    frozen_bits: int = FULL_PRECISION,
    scope: str = GLOBAL,
) -> FixPlan:
    """Ablation plan: same count and frozen values as the entropy plan, uniformly random positions."""
    shape = tuple(shape)
    if shape != bank.shape:
        raise DimensionError(f"plan shape {shape} does not match bank {bank.shape}")
    return FixPlan(
        tau=float(tau),
        epsilon=np.asarray(math.nan),
        masks=random_mask(shape, tau, seed, scope),
        frozen_values=frozen_means(bank, frozen_bits),
        scope=scope,
        provenance=RANDOM,
        seed=int(seed),
        frozen_bits=frozen_bits,
    )


# --- serialisation -------------------------------------------------------

_SCOPE_CODES = {GLOBAL: 0, PER_HEAD: 1}
_PROV_CODES = {ENTROPY: 0, RANDOM: 1}


def dumps_plan(plan: FixPlan) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.pack("d", plan.tau)
    eps = np.atleast_1d(plan.epsilon).astype(np.float64)
    w.pack("I", eps.size)
    w.array(eps, "f8")
    w.pack("BB", _SCOPE_CODES[plan.scope], _PROV_CODES[plan.provenance])
    w.pack("Q", plan.seed)
    w.pack("I", plan.frozen_bits)
    w.pack("4Q", *plan.shape)
    w.raw(np.packbits(plan.masks.reshape(-1), bitorder="little").tobytes())
    w.array(plan.frozen_values, "f4")
    return w.getvalue()


def loads_plan(data: bytes) -> FixPlan:
    r = Reader(data, "plan")
    r.header(MAGIC, VERSION)
    (tau,) = r.unpack("d", "tau")
    (n_eps,) = r.unpack("I", "threshold count")
    eps = r.array("f8", (n_eps,), "thresholds")
    scope_code, prov_code = r.unpack("BB", "scope/provenance")
    (seed,) = r.unpack("Q", "seed")
    (frozen_bits,) = r.unpack("I", "frozen bits")
    shape = tuple(r.unpack("4Q", "dims"))
    scopes = {v: k for k, v in _SCOPE_CODES.items()}
    provs = {v: k for k, v in _PROV_CODES.items()}
    if scope_code not in scopes or prov_code not in provs:
        raise FormatError("plan: unknown scope or provenance code")
    total = int(np.prod(shape))
    packed = np.frombuffer(r.take((total + 7) // 8, "masks"), dtype=np.uint8)
    masks = np.unpackbits(packed, count=total, bitorder="little").astype(bool).reshape(shape)
    frozen = r.array("f4", shape, "frozen values")
    if not r.at_end():
        raise FormatError("plan: trailing bytes")
    scope = scopes[scope_code]
    epsilon = eps.reshape(shape[:2]) if scope == PER_HEAD else eps.reshape(())
    return FixPlan(tau, epsilon, masks, frozen, scope, provs[prov_code], seed, frozen_bits)


def save_plan(plan: FixPlan, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps_plan(plan))


def load_plan(path: Union[str, Path]) -> FixPlan:
    return loads_plan(Path(path).read_bytes())
