"""EAMC checkpoint files.

Layout (all integers little-endian)::

    b"EAMC" | version u32
    config: count u16, then per field: name (u16 length + UTF-8) and value i64
    tensors: count u32, then per tensor: name (u16 length + UTF-8), rank u8,
             dims u64 * rank, float32 data
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from ..binio import Reader, Writer
from ..errors import FormatError
from .model import ModelConfig, check_params

MAGIC = b"EAMC"
VERSION = 1

# input standardisation constants travel with the weights
NORM_MEAN = "input.mean"
NORM_STD = "input.std"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(1, np.float32))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(1, np.float32))

    def __post_init__(self):
        check_params(self.params, self.config)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float32).reshape(-1)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float32).reshape(-1)
        if self.norm_mean.shape != (self.config.channels,) or self.norm_std.shape != (self.config.channels,):
            raise FormatError("normalisation constants must have one entry per channel")

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out[NORM_MEAN] = self.norm_mean
        out[NORM_STD] = self.norm_std
        return out


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    cfg = ckpt.config.to_dict()
    w.pack("H", len(cfg))
    for k, v in cfg.items():
        w.name(k)
        w.pack("q", v)
    tensors = ckpt.tensors()
    w.pack("I", len(tensors))
    for name, arr in tensors.items():
        w.name(name)
        w.pack("B", arr.ndim)
        for d in arr.shape:
            w.pack("Q", d)
        w.array(arr, "f4")
    return w.getvalue()


def loads_checkpoint(data: bytes) -> Checkpoint:
    r = Reader(data, "checkpoint")
    r.header(MAGIC, VERSION)
    (n_cfg,) = r.unpack("H", "config block")
    values = {}
    for _ in range(n_cfg):
        key = r.name("config block")
        (values[key],) = r.unpack("q", f"config field {key}")
    try:
        cfg = ModelConfig(**values)
    except TypeError as exc:
        raise FormatError(f"checkpoint: bad config block: {exc}") from None
    (n_t,) = r.unpack("I", "tensor count")
    tensors = {}
    for _ in range(n_t):
        name = r.name("tensor name")
        (rank,) = r.unpack("B", f"tensor {name}")
        dims = tuple(r.unpack("Q" * rank, f"tensor {name}")) if rank else ()
        tensors[name] = r.array("f4", dims, f"tensor {name}")
    if not r.at_end():
        raise FormatError("checkpoint: trailing bytes after last tensor")
    mean = tensors.pop(NORM_MEAN, np.zeros(cfg.channels, np.float32))
    std = tensors.pop(NORM_STD, np.ones(cfg.channels, np.float32))
    return Checkpoint(cfg, tensors, mean, std)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> str:
    """Write the checkpoint and return the SHA-256 of its bytes."""
    data = dumps_checkpoint(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
