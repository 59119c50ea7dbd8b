"""CSV and binary PGM export of per-weight maps (entropy, divergence, means)."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Union

import numpy as np

FULL = "full"
CLS = "cls"


def _select(values: np.ndarray, layer: Optional[int], head: Optional[int]):
    L, H = values.shape[:2]
    layers = range(L) if layer is None or layer < 0 else [layer]
    heads = range(H) if head is None or head < 0 else [head]
    for l in layers:
        for h in heads:
            if not (0 <= l < L and 0 <= h < H):
                raise IndexError(f"layer/head ({l}, {h}) outside map of shape {values.shape}")
            yield l, h


def _region(m: np.ndarray, region: str) -> np.ndarray:
    if region == FULL:
        return m
    if region == CLS:
        return m[:1]
    raise ValueError(f"region must be {FULL!r} or {CLS!r}")


def export_csv(values: np.ndarray, path: Union[str, Path], layer=None, head=None, region: str = FULL) -> int:
    """Write ``layer,head,i,j,value`` rows; returns the number of data rows."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "i", "j", "value"])
        for l, h in _select(values, layer, head):
            m = _region(values[l, h], region)
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    w.writerow([l, h, i, j, repr(float(m[i, j]))])
                    rows += 1
    return rows


def to_pgm(m: np.ndarray):
    """Min-max scale a 2-D map to 8-bit; returns ``(bytes, lo, hi)``.

    A constant map becomes an all-zero image.
    """
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        pix = np.rint((m - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        pix = np.zeros(m.shape, dtype=np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes(), lo, hi


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def export_pgm(values: np.ndarray, out_dir: Union[str, Path], stem: str, layer=None, head=None, region: str = FULL) -> list[Path]:
    """One ``<stem>_L<l>_H<h>.pgm`` per (layer, head) plus a ``.scale.txt`` sidecar each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for l, h in _select(values, layer, head):
        data, lo, hi = to_pgm(_region(values[l, h], region))
        p = out_dir / f"{stem}_L{l}_H{h}.pgm"
        p.write_bytes(data)
        p.with_suffix(".scale.txt").write_text(f"min={lo!r}\nmax={hi!r}\n")
        written.append(p)
    return written
