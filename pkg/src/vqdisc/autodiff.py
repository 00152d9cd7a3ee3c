"""Minimal reverse-mode gradient engine.

The model topology is fixed, so instead of a general autodiff graph the
engine records a linear tape of backward closures during the forward pass
and replays it in reverse.  Every op here has a hand-derived analytic
backward; the test suite checks each one against central finite
differences.

Values are float32 by default.  ``set_dtype``/``using_dtype`` switch the
working precision; the float64 mode exists for tight gradient checks only.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32


def default_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the working precision for newly created values."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch working precision (gradient-check tests)."""
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


class Var:
    """A value node: ndarray plus (lazily allocated) gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Parameter(Var):
    """A named trainable value; names are unique within a model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None


class Tape:
    """Execution-ordered record of backward closures."""

    def __init__(self):
        self._ops = []

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def backward(self, loss: Var) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the tape in reverse."""
        if loss.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def constant(data) -> Var:
    """A Var that participates in forwards but is never differentiated."""
    return Var(data)


# ---------------------------------------------------------------------------
# primitives


def linear(tape: Tape, x: Var, w: Var, b: Var | None) -> Var:
    """y = x @ w (+ b), applied over the last axis of x."""
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(
            f"linear: input width {x.data.shape[-1]} != weight rows {d_in}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (d_out,):
            raise ValueError(f"linear: bias shape {b.data.shape} != ({d_out},)")
        y = y + b.data
    out = Var(y)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g @ w.data.T)
        g2 = g.reshape(-1, d_out)
        w.accum(x.data.reshape(-1, d_in).T @ g2)
        if b is not None:
            b.accum(g2.sum(axis=0))

    tape.record(backward)
    return out


def space_to_depth(tape: Tape, x: Var, r: int) -> Var:
    """(B,H,W,C) -> (B,H/r,W/r,r*r*C), each r x r block's channels stacked
    in row-major block order."""
    b, h, w, c = x.data.shape
    if h % r or w % r:
        raise ValueError(f"space_to_depth: {h}x{w} not divisible by r={r}")
    # (B,H/r,r,W/r,r,C) -> (B,H/r,W/r,r,r,C)
    y = (x.data.reshape(b, h // r, r, w // r, r, c)
         .transpose(0, 1, 3, 2, 4, 5)
         .reshape(b, h // r, w // r, r * r * c))
    out = Var(y)

    def backward():
        g = out.grad
        if g is None:
            return
        gx = (g.reshape(b, h // r, w // r, r, r, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, h, w, c))
        x.accum(gx)

    tape.record(backward)
    return out


def depth_to_space(tape: Tape, x: Var, r: int) -> Var:
    """Exact inverse of space_to_depth."""
    b, h, w, c = x.data.shape
    if c % (r * r):
        raise ValueError(f"depth_to_space: channels {c} not divisible by r^2")
    co = c // (r * r)
    y = (x.data.reshape(b, h, w, r, r, co)
         .transpose(0, 1, 3, 2, 4, 5)
         .reshape(b, h * r, w * r, co))
    out = Var(y)

    def backward():
        g = out.grad
        if g is None:
            return
        gx = (g.reshape(b, h, r, w, r, co)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, h, w, c))
        x.accum(gx)

    tape.record(backward)
    return out


def transposed_conv2d(tape: Tape, x: Var, kernel: Var, stride: int) -> Var:
    """Non-overlapping transposed convolution: kernel size equals stride, so
    every output pixel is touched by exactly one input pixel.

    x: (B,H,W,Cin), kernel: (r,r,Cin,Cout) -> (B,H*r,W*r,Cout)
    """
    r0, r1, c_in, c_out = kernel.data.shape
    if r0 != stride or r1 != stride:
        raise ValueError(
            f"transposed_conv2d: kernel {r0}x{r1} must equal stride {stride}")
    if stride < 1:
        raise ValueError("transposed_conv2d: stride must be >= 1")
    b, h, w, cx = x.data.shape
    if cx != c_in:
        raise ValueError(
            f"transposed_conv2d: input channels {cx} != kernel {c_in}")
    r = stride
    # out[b, i*r+di, j*r+dj, co] = sum_ci x[b,i,j,ci] * k[di,dj,ci,co]
    km = kernel.data.transpose(2, 0, 1, 3).reshape(c_in, r * r * c_out)
    y = ((x.data @ km)
         .reshape(b, h, w, r, r, c_out)
         .transpose(0, 1, 3, 2, 4, 5)
         .reshape(b, h * r, w * r, c_out))
    out = Var(y)

    def backward():
        g = out.grad
        if g is None:
            return
        gb = (g.reshape(b, h, r, w, r, c_out)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, h, w, r * r * c_out))
        km = kernel.data.transpose(2, 0, 1, 3).reshape(c_in, r * r * c_out)
        x.accum(gb @ km.T)
        gk = x.data.reshape(-1, c_in).T @ gb.reshape(-1, r * r * c_out)
        kernel.accum(gk.reshape(c_in, r, r, c_out).transpose(1, 2, 0, 3))

    tape.record(backward)
    return out


def relu(tape: Tape, x: Var) -> Var:
    out = Var(np.maximum(x.data, 0))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g * (x.data > 0))

    tape.record(backward)
    return out


def sigmoid(tape: Tape, x: Var) -> Var:
    out = Var(1.0 / (1.0 + np.exp(-x.data)))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g * out.data * (1.0 - out.data))

    tape.record(backward)
    return out


def activation(tape: Tape, x: Var, kind: str) -> Var:
    if kind == "relu":
        return relu(tape, x)
    if kind == "sigmoid":
        return sigmoid(tape, x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(tape: Tape, x: Var) -> Var:
    """(B,H,W,C) -> (B,C), per-channel spatial mean."""
    b, h, w, c = x.data.shape
    out = Var(x.data.mean(axis=(1, 2)))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape))

    tape.record(backward)
    return out


def avg_pool2d(tape: Tape, x: Var, factor: int) -> Var:
    """Non-overlapping area-average downsampling on a (B,H,W,C) grid."""
    b, h, w, c = x.data.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    f = factor
    out = Var(x.data.reshape(b, h // f, f, w // f, f, c).mean(axis=(2, 4)))

    def backward():
        g = out.grad
        if g is None:
            return
        gx = np.broadcast_to(
            g[:, :, None, :, None, :] / (f * f),
            (b, h // f, f, w // f, f, c)).reshape(b, h, w, c)
        x.accum(gx)

    tape.record(backward)
    return out


def add(tape: Tape, a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Var(a.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accum(g)
        b.accum(g)

    tape.record(backward)
    return out


def concat_channels(tape: Tape, a: Var, b: Var) -> Var:
    """Concatenate two (B,*) arrays along the last axis."""
    ca = a.data.shape[-1]
    out = Var(np.concatenate([a.data, b.data], axis=-1))

    def backward():
        g = out.grad
        if g is None:
            return
        a.accum(g[..., :ca])
        b.accum(g[..., ca:])

    tape.record(backward)
    return out


def scale_channels(tape: Tape, x: Var, f: Var) -> Var:
    """x (B,H,W,C) * f (B,C), broadcast over spatial positions."""
    if x.data.shape[0] != f.data.shape[0] or x.data.shape[-1] != f.data.shape[-1]:
        raise ValueError("scale_channels: batch/channel mismatch")
    fb = f.data[:, None, None, :]
    out = Var(x.data * fb)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g * fb)
        f.accum((g * x.data).sum(axis=(1, 2)))

    tape.record(backward)
    return out


def reshape(tape: Tape, x: Var, shape) -> Var:
    out = Var(x.data.reshape(shape))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g.reshape(x.data.shape))

    tape.record(backward)
    return out


def straight_through(tape: Tape, x: Var, values: np.ndarray) -> Var:
    """Forward: replace x's value by ``values``.  Backward: identity to x.

    The replacement values (e.g. codebook lookups) receive no gradient.
    """
    if values.shape != x.data.shape:
        raise ValueError("straight_through: value shape mismatch")
    out = Var(values)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum(g)

    tape.record(backward)
    return out


def mse_loss(tape: Tape, pred: Var, target: np.ndarray) -> Var:
    """Mean over all elements of squared difference (target is constant)."""
    if pred.data.shape != target.shape:
        raise ValueError("mse_loss: shape mismatch")
    diff = pred.data - target
    out = Var(np.mean(diff * diff))

    def backward():
        g = out.grad
        if g is None:
            return
        pred.accum((2.0 / diff.size) * diff * g)

    tape.record(backward)
    return out


def row_sq_norm_mean(tape: Tape, x: Var, target: np.ndarray) -> Var:
    """mean over rows of ||x_m - target_m||^2 (target is constant)."""
    if x.data.shape != target.shape:
        raise ValueError("row_sq_norm_mean: shape mismatch")
    m = x.data.shape[0]
    diff = x.data - target
    out = Var(np.sum(diff * diff) / m)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accum((2.0 / m) * diff * g)

    tape.record(backward)
    return out


def weighted_sum(tape: Tape, terms: list[Var], weights: list[float]) -> Var:
    """Weighted sum of scalar Vars."""
    out = Var(sum(float(w) * t.data.item() for t, w in zip(terms, weights)))

    def backward():
        g = out.grad
        if g is None:
            return
        for t, w in zip(terms, weights):
            t.accum(np.asarray(w * g, dtype=t.data.dtype).reshape(t.data.shape))

    tape.record(backward)
    return out
