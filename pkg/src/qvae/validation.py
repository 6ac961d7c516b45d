"""Input checks shared by the estimators and the CLI."""

import numpy as np
from sklearn.utils import check_array

from .autograd import ShapeError

PIXEL_TOL = 1e-6


def check_images(X, side=32):
    """Coerce to float32 (N, 1, side, side) and require pixels in [0, 1].

    Accepts (N, side*side), (N, side, side) or (N, 1, side, side).
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != side * side:
            raise ShapeError(f"expected {side * side} features per row, got {X.shape[1]}")
        X = X.reshape(-1, 1, side, side)
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, side, side):
        raise ShapeError(f"expected images of shape (N, 1, {side}, {side}), got {X.shape}")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if X.size and (X.min() < -PIXEL_TOL or X.max() > 1 + PIXEL_TOL):
        raise ValueError(f"pixel values must lie in [0, 1], got [{X.min():.4g}, {X.max():.4g}]")
    return np.clip(X, 0.0, 1.0)


def check_latents(Z, dim):
    Z = check_array(Z, dtype=np.float32)
    if Z.shape[1] != dim:
        raise ShapeError(f"expected latent width {dim}, got {Z.shape[1]}")
    return Z


def as_generator(random_state=None):
    """numpy Generator from None, an int seed, a RandomState or a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, np.random.RandomState):
        return np.random.default_rng(random_state.randint(2**31 - 1))
    return np.random.default_rng(random_state)
