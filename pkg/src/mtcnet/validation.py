"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .groundtruth import HeadAnnotation


def check_image_batch(X, channels=3):
    """Return a float64 ``(N, C, H, W)`` array.

    Accepts a 4-D array or a sequence of equally sized ``(C, H, W)`` images.
    Channels-last input ``(N, H, W, C)`` is transposed when unambiguous.
    """
    if isinstance(X, np.ndarray):
        arr = X.astype(np.float64, copy=False)
    else:
        images = [np.asarray(im, dtype=np.float64) for im in X]
        if not images:
            raise ValueError("expected at least one image")
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise ShapeError(f"images must share one shape to form a batch, got {sorted(shapes)}")
        arr = np.stack(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected images shaped (N, {channels}, H, W), got {arr.shape}")
    if arr.shape[1] != channels and arr.shape[3] == channels:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    return np.ascontiguousarray(arr)


def check_annotations(y, image_size):
    """Coerce ``y`` (point arrays or HeadAnnotation objects) to HeadAnnotations."""
    out = []
    for item in y:
        if isinstance(item, HeadAnnotation):
            if tuple(item.image_size) != tuple(image_size):
                item = HeadAnnotation(item.points, image_size)
            out.append(item)
        else:
            out.append(HeadAnnotation(np.asarray(item, dtype=np.float64).reshape(-1, 2), image_size))
    return out


def check_counts(counts):
    arr = np.asarray(counts, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("expected at least one count")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("counts must be finite and non-negative")
    return arr
