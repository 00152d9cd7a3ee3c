"""Input validation helpers shared by the estimator and the harness."""

from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate a stack of RGB images: (n, H, W, 3), finite, values in [0, 1].

    Returns a float32 copy.  A single (H, W, 3) image is promoted to n=1.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"images must be {image_size}x{image_size}, "
                         f"got {X.shape[1]}x{X.shape[2]}")
    if X.shape[1] % 8 or X.shape[2] % 8:
        raise ValueError("image extents must be divisible by 8")
    X = X.astype(np.float32, copy=True)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_snr_db(snr_db) -> float:
    snr_db = float(snr_db)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    return snr_db


def check_index_matrix(I, n_indices: int) -> np.ndarray:
    """Validate a (n, M_total) integer index matrix from transform()."""
    I = np.asarray(I)
    if I.ndim == 1:
        I = I[None]
    if I.ndim != 2 or I.shape[1] != n_indices:
        raise ValueError(f"expected an (n, {n_indices}) index matrix, "
                         f"got {I.shape}")
    if not np.issubdtype(I.dtype, np.integer):
        raise ValueError("indices must be integers")
    return I.astype(np.int32, copy=False)
