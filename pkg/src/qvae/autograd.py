"""Dense tensors with reverse-mode differentiation, plus the Adam optimizer.

Only the operations the models and the proxy feature extractor need are
provided.  Binary operations require identical shapes; the single allowed
form of broadcasting is a Python scalar combined with a tensor.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def determinism(enabled=True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(DEFAULT_DTYPE, copy=False)


class Tensor:
    """An n-dimensional real array that records how it was computed.

    ``data`` is float32 unless a float64 array is passed in explicitly, which
    the gradient checks use to get a trustworthy oracle.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _result(data, parents, backward_fn):
    """Create an op output and link it into the graph if any parent needs it."""
    out = Tensor(data, dtype=data.dtype)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out._parents = live
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad += g.astype(t.grad.dtype, copy=False)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _lift(x, like):
    if isinstance(x, Tensor):
        return x, False
    if np.ndim(x) != 0:
        raise ShapeError(
            f"only Python scalars broadcast against tensors, got array of shape {np.shape(x)}"
        )
    return Tensor(np.asarray(x, dtype=like.data.dtype)), True


# ---------------------------------------------------------------- elementwise


def add(a, b):
    b, b_scalar = _lift(b, a)
    if b_scalar:
        out_data = a.data + b.data

        def _bw(g):
            _accum(a, g)

        return _result(out_data, (a,), _bw)
    _check_same(a, b, "add")

    def _bw(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), _bw)


def neg(a):
    def _bw(g):
        _accum(a, -g)

    return _result(-a.data, (a,), _bw)


def sub(a, b):
    b, b_scalar = _lift(b, a)
    if b_scalar:
        return add(a, -b.data.item())
    _check_same(a, b, "sub")

    def _bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), _bw)


def mul(a, b):
    b, b_scalar = _lift(b, a)
    if b_scalar:
        c = b.data

        def _bw(g):
            _accum(a, g * c)

        return _result(a.data * c, (a,), _bw)
    _check_same(a, b, "mul")

    def _bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), _bw)


def exp(a):
    out_data = np.exp(a.data)

    def _bw(g):
        _accum(a, g * out_data)

    return _result(out_data, (a,), _bw)


def log(a):
    def _bw(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), _bw)


def relu(a):
    mask = a.data > 0

    def _bw(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), _bw)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out_data = _stable_sigmoid(a.data)

    def _bw(g):
        _accum(a, g * out_data * (1 - out_data))

    return _result(out_data, (a,), _bw)


def square(a):
    def _bw(g):
        _accum(a, 2 * g * a.data)

    return _result(a.data * a.data, (a,), _bw)


def clamp(a, lo, hi):
    """Clip values to ``[lo, hi]``; gradient is zero where clipping happened."""
    inside = (a.data >= lo) & (a.data <= hi)

    def _bw(g):
        _accum(a, g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), _bw)


# ----------------------------------------------------------------- reductions


def sum(a):  # noqa: A001 - mirrors numpy naming
    def _bw(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype), (a,), _bw)


def mean(a):
    n = a.size

    def _bw(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _result(np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype), (a,), _bw)


def reshape(a, shape):
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def _bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(out_data, (a,), _bw)


# --------------------------------------------------------------------- linear


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), _bw)


def linear(x, weight, bias=None):
    """Dense layer ``x @ weight + bias`` with ``weight`` laid out (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: inner dimensions disagree {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]}")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if x.requires_grad:
            _accum(x, g @ weight.data.T)
        if weight.requires_grad:
            _accum(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result(out_data, parents, _bw)


# ------------------------------------------------------------- convolutions


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and weight {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    s = stride
    Ho = conv_output_size(H, kh, s, padding)
    Wo = conv_output_size(W, kw, s, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, C, Ho, Wo, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out_data = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if weight.requires_grad:
            _accum(weight, (gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            _accum(x, dxp[:, :, padding : padding + H, padding : padding + W])

    return _result(np.ascontiguousarray(out_data), parents, _bw)


def conv_transpose2d(x, weight, bias=None, stride=2, padding=1):
    """Transposed convolution of ``x`` (B, C, H, W) with ``weight`` (C, O, k, k).

    This is the exact adjoint of :func:`conv2d` with the same weight tensor
    and geometry.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: incompatible input {x.shape} and weight {weight.shape}"
        )
    B, C, H, W = x.shape
    _, O, kh, kw = weight.shape
    s, p = stride, padding
    Ho = conv_transpose_output_size(H, kh, s, p)
    Wo = conv_transpose_output_size(W, kw, s, p)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {Ho}x{Wo}")
    Hf = (H - 1) * s + kh
    Wf = (W - 1) * s + kw
    xmat = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = weight.data.reshape(C, O * kh * kw)
    contrib = (xmat @ wmat).reshape(B, H, W, O, kh, kw)
    full = np.zeros((B, O, Hf, Wf), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + s * H : s, j : j + s * W : s] += contrib[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    out_data = full[:, :, p : p + Ho, p : p + Wo]
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, O, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gfull = np.zeros((B, O, Hf, Wf), dtype=g.dtype)
        gfull[:, :, p : p + Ho, p : p + Wo] = g
        # gather the k*k strided slices: (B, O, H, W, kh, kw)
        gcols = np.empty((B, H, W, O, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, :, i, j] = gfull[:, :, i : i + s * H : s, j : j + s * W : s].transpose(
                    0, 2, 3, 1
                )
        gmat = gcols.reshape(B * H * W, O * kh * kw)
        if x.requires_grad:
            _accum(x, (gmat @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            _accum(weight, (xmat.T @ gmat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(np.ascontiguousarray(out_data), parents, _bw)


def maxpool2d(x, k=2, s=2):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if H % k or W % k or s != k:
        raise ShapeError(f"maxpool2d: extents {H}x{W} not divisible by window {k}")
    Ho, Wo = H // k, W // k
    blocks = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    # argmax returns the first maximal index, which fixes tie-breaking
    idx = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gblocks = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accum(x, gx)

    return _result(out_data, (x,), _bw)


# --------------------------------------------------------------------- losses


def bce_sum(pred, target, eps=BCE_EPS):
    """Binary cross-entropy summed over every element.

    Predictions are clamped to ``[eps, 1 - eps]`` before the logarithm.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    p = pred.data.astype(np.float64)
    inside = (p >= eps) & (p <= 1 - eps)
    pc = np.clip(p, eps, 1 - eps)
    t = target.astype(np.float64)
    loss = -(t * np.log(pc) + (1 - t) * np.log1p(-pc)).sum()

    def _bw(g):
        d = (pc - t) / (pc * (1 - pc)) * inside
        _accum(pred, g * d)

    return _result(np.asarray(loss, dtype=pred.data.dtype), (pred,), _bw)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` (N, K) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        _accum(logits, g * d / n)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), _bw)


# ------------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate: calling twice without ``zero_grad`` adds the
    second pass onto the first.  Returns the number of nodes visited.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = np.zeros_like(node.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return len(order)


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kwargs):
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kwargs)


def adam_step(param, state, lr):
    if param.grad is None:
        raise ValueError(f"adam_step: parameter {param.name or ''} has no gradient")
    if state.m.shape != param.shape:
        raise ShapeError(f"adam_step: state shape {state.m.shape} vs parameter {param.shape}")
    g = param.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * (g * g)
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    if lr != 0:
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.data.dtype, copy=False
        )


@dataclass
class Adam:
    """Adam over a fixed list of parameters."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamState.zeros_like(p, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            for p in self.params
        ]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, st in zip(self.params, self.states):
            adam_step(p, st, self.lr)
