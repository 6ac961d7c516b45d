"""Down-sampling front-ends: first-pixel window pooling and the single-qubit
angle-encoding filter.

Each pixel ``p`` is loaded into its own qubit by ``R_Y(s * p)`` acting on
``|0>``, and the filter returns the Pauli-Z expectation.  The state after the
rotation is ``(cos(theta/2), sin(theta/2))``, so the expectation has the
closed form ``cos^2(theta/2) - sin^2(theta/2) = cos(theta)``.  Both the exact
expectation and a finite-shot estimator are provided.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autograd import ShapeError, Tensor, _result
from .validation import as_generator

PIXEL_TOL = 1e-6


def window_pool_first(images, window=2):
    """Keep the top-left pixel of every ``window x window`` block.

    Works on plain arrays and on :class:`Tensor` (differentiable: the gradient
    is scattered back to the kept positions).
    """
    shape = images.shape
    if len(shape) < 2 or shape[-1] % window or shape[-2] % window:
        raise ShapeError(f"window_pool_first needs extents divisible by {window}, got {shape}")
    if not isinstance(images, Tensor):
        return np.ascontiguousarray(np.asarray(images)[..., ::window, ::window])
    x = images

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[..., ::window, ::window] = g
        x.grad += gx

    return _result(np.ascontiguousarray(x.data[..., ::window, ::window]), (x,), _bw)


def _check_pixels(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size and (p.min() < -PIXEL_TOL or p.max() > 1 + PIXEL_TOL):
        raise ValueError(
            f"pixels must lie in [0, 1] (got range [{p.min():.6g}, {p.max():.6g}])"
        )
    return p


def ry_matrix(theta):
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]])


def ry_statevector(theta):
    """State ``R_Y(theta)|0>`` as the real amplitude pair (a0, a1)."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta / 2), np.sin(theta / 2)], axis=-1)


def z_expectation(theta):
    """Exact <Z> after ``R_Y(theta)`` on ``|0>``."""
    amp = ry_statevector(theta)
    return amp[..., 0] ** 2 - amp[..., 1] ** 2


def quantum_encode_grad(theta):
    """d<Z>/dtheta, i.e. ``-sin(theta)``."""
    return -np.sin(theta)


def parameter_shift_grad(theta, shift=np.pi / 2):
    """Two-term shift rule ``(f(t + pi/2) - f(t - pi/2)) / 2`` on the expectation."""
    return (z_expectation(theta + shift) - z_expectation(theta - shift)) / 2


def quantum_encode(pixels, angle_scale=np.pi):
    """Exact Pauli-Z features for pixels in [0, 1].

    Arrays go through the statevector route; tensors use ``cos`` directly and
    carry the analytic gradient ``-s * sin(s * p)`` back to the pixels.
    """
    if isinstance(pixels, Tensor):
        p = pixels
        _check_pixels(p.data)
        theta = angle_scale * p.data.astype(np.float64)
        out = np.cos(theta).astype(p.data.dtype)

        def _bw(g):
            p.grad += (g * angle_scale * quantum_encode_grad(theta)).astype(p.grad.dtype)

        return _result(out, (p,), _bw)
    p = _check_pixels(pixels)
    return z_expectation(angle_scale * p)


def quantum_encode_sampled(pixels, angle_scale=np.pi, shots=1024, random_state=None):
    """Finite-shot estimate of <Z>: mean of ``shots`` +/-1 outcomes per pixel."""
    if int(shots) < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    rng = as_generator(random_state)
    p = _check_pixels(pixels)
    p_plus = ry_statevector(angle_scale * p)[..., 0] ** 2
    n_plus = rng.binomial(int(shots), np.clip(p_plus, 0.0, 1.0))
    return (2.0 * n_plus - shots) / shots


class FirstPixelPool(TransformerMixin, BaseEstimator):
    """Stateless transformer for CDP down-sampling of (N, 1, H, W) images."""

    def __init__(self, window=2):
        self.window = window

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return window_pool_first(np.asarray(X), self.window)


class QuantumAngleEncoder(TransformerMixin, BaseEstimator):
    """Pool 2x2 windows, then map each kept pixel to its Pauli-Z expectation.

    Parameters
    ----------
    angle_scale : float, default=pi
        Rotation angle per unit pixel intensity.
    shots : int or None, default=None
        ``None`` returns exact expectations; otherwise a finite-shot estimate.
    pool : bool, default=True
        Apply first-pixel pooling before encoding.
    random_state : int, RandomState or None
        Only used when ``shots`` is set.

    The output is flattened to (N, features).  No trainable parameters.
    """

    def __init__(self, angle_scale=np.pi, shots=None, pool=True, random_state=None):
        self.angle_scale = angle_scale
        self.shots = shots
        self.pool = pool
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.pool:
            X = window_pool_first(X)
        X = X.reshape(X.shape[0], -1)
        if self.shots is None:
            return quantum_encode(X, self.angle_scale)
        return quantum_encode_sampled(X, self.angle_scale, self.shots, self.random_state)
