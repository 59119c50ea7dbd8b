"""Uniform affine fake quantisation with min-max calibration.

Weights are quantised per output channel (the last axis of ``x @ W``
matrices), activations per tensor. Rounding is round-half-to-even
everywhere (``numpy.rint``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ConfigError, EmptyCalibrationError, RangeError

DEGENERATE_SCALE = 1e-8
FULL_PRECISION = 32

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-output-channel"


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: np.ndarray  # scalar or one entry per output channel
    zero_point: np.ndarray
    granularity: str = PER_TENSOR

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "zero_point", np.asarray(self.zero_point, dtype=np.int64))
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > self.qmax):
            raise ValueError("zero_point outside the integer grid")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def grid_range(self):
        return self.scale * (0 - self.zero_point), self.scale * (self.qmax - self.zero_point)


def params_from_range(lo, hi, bits: int, granularity: str = PER_TENSOR) -> QuantParams:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    qmax = 2**bits - 1
    span = hi - lo
    # a subnormal span underflows to 0 here; treat it like a constant tensor
    scale = span / qmax
    scale = np.where(scale > 0, scale, DEGENERATE_SCALE)
    with np.errstate(over="ignore"):
        zp = np.clip(np.rint(-lo / scale), 0, qmax).astype(np.int64)
    return QuantParams(bits, scale, zp, granularity)


def calibrate_minmax(samples: Iterable[np.ndarray], bits: int, granularity: str = PER_TENSOR) -> QuantParams:
    """Min-max calibration over a stream of tensors.

    With per-output-channel granularity the extrema are taken over every axis
    except the last.
    """
    lo = hi = None
    for s in samples:
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("calibration samples must be finite")
        if granularity == PER_CHANNEL:
            flat = s.reshape(-1, s.shape[-1])
            smin, smax = flat.min(axis=0), flat.max(axis=0)
        else:
            smin, smax = s.min(), s.max()
        lo = smin if lo is None else np.minimum(lo, smin)
        hi = smax if hi is None else np.maximum(hi, smax)
    if lo is None:
        raise EmptyCalibrationError("calibrate_minmax needs at least one sample")
    return params_from_range(lo, hi, bits, granularity)


def fake_quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantise-dequantise round trip; output dtype follows the input."""
    x = np.asarray(x)
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    q = np.clip(np.rint(x.astype(np.float64) / qp.scale) + qp.zero_point, 0, qp.qmax)
    return ((q - qp.zero_point) * qp.scale).astype(out_dtype)


def quantize_frozen_attention(mean_map: np.ndarray, bits: int) -> np.ndarray:
    """Snap attention values in [0, 1] onto a ``2**bits``-level grid; 32 bits is identity."""
    m = np.asarray(mean_map)
    if np.any(m < -1e-6) or np.any(m > 1 + 1e-6):
        raise RangeError("frozen attention values must lie in [0, 1]")
    if bits >= FULL_PRECISION:
        return m.copy()
    levels = 2**bits - 1
    return (np.clip(np.rint(m.astype(np.float64) * levels), 0, levels) / levels).astype(m.dtype)


@dataclass
class QuantConfig:
    """Fake-quantisation settings plus calibrated per-site parameters.

    Implements the forward pass's quantisation hook: ``weight`` and
    ``activation`` return fake-quantised tensors for calibrated sites and pass
    everything else through.
    """

    weight_bits: int = 4
    activation_bits: int = 4
    frozen_attention_bits: int = 4
    weight_params: dict[str, QuantParams] = field(default_factory=dict)
    activation_params: dict[str, QuantParams] = field(default_factory=dict)
    calibration_samples: int = 0

    def __post_init__(self):
        self._wcache: dict[str, np.ndarray] = {}

    @property
    def enabled(self) -> bool:
        return bool(self.weight_params or self.activation_params)

    def weight(self, name: str, w: np.ndarray) -> np.ndarray:
        qp = self.weight_params.get(name)
        if qp is None:
            return w
        cached = self._wcache.get(name)
        if cached is None or cached.shape != w.shape:
            cached = fake_quantize(w, qp)
            self._wcache[name] = cached
        return cached

    def activation(self, site: str, x: np.ndarray) -> np.ndarray:
        qp = self.activation_params.get(site)
        return x if qp is None else fake_quantize(x, qp)

    def to_text(self) -> str:
        lines = [
            f"weight_bits={self.weight_bits}",
            f"activation_bits={self.activation_bits}",
            f"frozen_attention_bits={self.frozen_attention_bits}",
            f"calibration_samples={self.calibration_samples}",
        ]
        for kind, table in (("weight", self.weight_params), ("activation", self.activation_params)):
            for site, qp in table.items():
                scales = " ".join(repr(float(s)) for s in np.ravel(qp.scale))
                zps = " ".join(str(int(z)) for z in np.ravel(qp.zero_point))
                lines.append(f"{kind}:{site}={qp.bits}|{qp.granularity}|{scales}|{zps}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "QuantConfig":
        head: dict[str, int] = {}
        tables: dict[str, dict[str, QuantParams]] = {"weight": {}, "activation": {}}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"quant config line {lineno}: expected key=value")
            if ":" in key:
                kind, site = key.split(":", 1)
                if kind not in tables:
                    raise ConfigError(f"quant config line {lineno}: unknown table {kind!r}")
                bits, gran, scales, zps = value.split("|")
                scale = np.array([float(s) for s in scales.split()])
                zp = np.array([int(z) for z in zps.split()])
                if gran == PER_TENSOR:
                    scale, zp = scale.reshape(()), zp.reshape(())
                tables[kind][site] = QuantParams(int(bits), scale, zp, gran)
            elif key in ("weight_bits", "activation_bits", "frozen_attention_bits", "calibration_samples"):
                head[key] = int(value)
            else:
                raise ConfigError(f"quant config line {lineno}: unknown key {key!r}")
        return cls(weight_params=tables["weight"], activation_params=tables["activation"], **head)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QuantConfig":
        return cls.from_text(Path(path).read_text())


class ActivationObserver:
    """Forward-pass hook that records running min/max per activation site."""

    def __init__(self) -> None:
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}

    def weight(self, name, w):
        return w

    def activation(self, site, x):
        lo, hi = float(np.min(x)), float(np.max(x))
        self.lo[site] = min(lo, self.lo.get(site, lo))
        self.hi[site] = max(hi, self.hi.get(site, hi))
        return x


def calibrate_model(
    params: dict[str, np.ndarray],
    cfg,
    images: np.ndarray,
    weight_bits: int = 4,
    activation_bits: int = 4,
    frozen_attention_bits: int = 4,
    batch_size: int = 64,
    max_batches: int = 32,
) -> QuantConfig:
    """Min-max calibrate every linear weight (per channel) and linear input (per tensor)."""
    from .vit.model import forward, linear_weight_names

    if len(images) == 0:
        raise EmptyCalibrationError("quantisation calibration needs at least one image")
    wparams: dict[str, QuantParams] = {}
    if weight_bits < FULL_PRECISION:
        for name in linear_weight_names(cfg):
            wparams[name] = calibrate_minmax([params[name]], weight_bits, PER_CHANNEL)
    aparams: dict[str, QuantParams] = {}
    n_used = 0
    if activation_bits < FULL_PRECISION:
        obs = ActivationObserver()
        for b, start in enumerate(range(0, len(images), batch_size)):
            if b >= max_batches:
                break
            chunk = images[start : start + batch_size]
            forward(chunk, params, cfg, quant=obs)
            n_used += len(chunk)
        for site in obs.lo:
            aparams[site] = params_from_range(obs.lo[site], obs.hi[site], activation_bits)
    return QuantConfig(
        weight_bits=weight_bits,
        activation_bits=activation_bits,
        frozen_attention_bits=frozen_attention_bits,
        weight_params=wparams,
        activation_params=aparams,
        calibration_samples=n_used,
    )
