"""Input validation helpers for the estimator API."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d


def check_images(X, image_size: Optional[int] = None, channels: Optional[int] = None) -> np.ndarray:
    """Validate a stack of 8-bit images and return it as ``(n, H, W, C)`` uint8.

    Accepts ``(n, H, W)`` grayscale stacks. Integer arrays must already lie in
    [0, 255]; floating arrays are rejected so that callers cannot silently pass
    pre-normalised data.
    """
    X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, H, W[, C]), got {X.shape}")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.integer):
            raise ValueError(f"images must be uint8 pixel arrays, got dtype {X.dtype}")
        if X.min() < 0 or X.max() > 255:
            raise ValueError("integer pixel values must lie in [0, 255]")
        X = X.astype(np.uint8)
    n, H, W, C = X.shape
    if H != W:
        raise ValueError(f"images must be square, got {H}x{W}")
    if image_size is not None and H != image_size:
        raise ValueError(f"images are {H}x{W}, model expects {image_size}x{image_size}")
    if channels is not None and C != channels:
        raise ValueError(f"images have {C} channels, model expects {channels}")
    return X


def check_images_labels(X, y, image_size=None, channels=None):
    X = check_images(X, image_size, channels)
    y = column_or_1d(y, warn=True)
    check_consistent_length(X, y)
    return X, y


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be a fraction in [0, 1], got {tau}")
    return tau


def check_bits(bits: int, name: str, lo: int = 1, hi: int = 32) -> int:
    bits = int(bits)
    if not lo <= bits <= hi:
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {bits}")
    return bits
