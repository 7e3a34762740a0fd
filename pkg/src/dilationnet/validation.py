"""Input checks shared by the estimator facade."""

from __future__ import annotations

import numpy as np

FloatArray = np.ndarray


def check_image_batch(x, resolution: int | None = None,
                      name: str = "X") -> FloatArray:
    """Validate a (n, r, r, 3) image batch with values in [0, 1]."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be a 4-D image batch "
                         f"(n, r, r, 3), got shape {arr.shape}")
    n, h, w, c = arr.shape
    if n == 0:
        raise ValueError(f"{name} is empty")
    if c != 3:
        raise ValueError(f"{name} must carry 3 channels, got {c}")
    if h != w:
        raise ValueError(f"{name} images must be square, got {h}x{w}")
    if resolution is not None and h != resolution:
        raise ValueError(f"{name} images are {h}x{w} but this model expects "
                         f"{resolution}x{resolution}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]; "
                         f"divide raw pixel data by 255 first")
    return arr


def check_binary_labels(y, n: int) -> FloatArray:
    """Validate labels as a length-n vector over {0, 1}."""
    arr = np.asarray(y, dtype=np.float32).reshape(-1)
    if arr.size != n:
        raise ValueError(f"expected {n} labels, got {arr.size}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return arr
