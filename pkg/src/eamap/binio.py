"""Little-endian binary reader/writer helpers for the EAM* file formats."""
from __future__ import annotations

import struct

import numpy as np

from .errors import MagicError, TruncationError, VersionError


class Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(bytes(b))

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def name(self, s: str) -> None:
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.raw(b)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self.raw(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, what: str) -> None:
        self.data = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncationError(
                f"{self.what}: truncated while reading {context} at byte offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)",
                offset=self.pos,
                tensor=context,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, context: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), context))

    def name(self, context: str) -> str:
        (n,) = self.unpack("H", context)
        return bytes(self.take(n, context)).decode("utf-8")

    def array(self, dtype: str, shape, context: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        buf = self.take(count * dt.itemsize, context)
        return np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype).newbyteorder("="), copy=True).reshape(shape)

    def header(self, magic: bytes, version: int) -> None:
        got = bytes(self.take(len(magic), "magic"))
        if got != magic:
            raise MagicError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        (v,) = self.unpack("I", "version")
        if v != version:
            raise VersionError(f"{self.what}: unsupported format version {v} (expected {version})")

    def at_end(self) -> bool:
        return self.pos == len(self.data)
