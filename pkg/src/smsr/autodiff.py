"""Minimal reverse-mode differentiation over the engine's op set.

Every op accepts either :class:`Var` nodes or plain arrays.  When no operand
is a ``Var`` the op is a plain numpy computation and nothing is recorded, so
the same forward code serves training (with a tape) and evaluation (without).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T


class Parameter:
    """A trainable array together with its gradient and Adam moments."""

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


class Var:
    __slots__ = ("value", "grad", "tape")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, value: np.ndarray, tape: "Tape"):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[tuple[Var, Parameter]] = []

    def var(self, value) -> Var:
        """A differentiable leaf that is not tied to a parameter."""
        return Var(np.asarray(value), self)

    def watch(self, param: Parameter) -> Var:
        """Leaf whose gradient is accumulated into ``param.grad`` by backward."""
        v = Var(param.value, self)
        self._leaves.append((v, param))
        return v

    def record(self, op: str, inputs, output: Var, backward: Callable):
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss: Var):
        if not isinstance(loss, Var) or loss.tape is not self or not self.nodes:
            raise RuntimeError("backward() needs a loss node recorded on this tape")
        if loss.value.size != 1:
            raise RuntimeError(f"loss must be a scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.output.grad = None
            for x in node.inputs:
                if isinstance(x, Var):
                    x.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for x, gx in zip(node.inputs, grads):
                if isinstance(x, Var) and gx is not None:
                    x.grad = gx if x.grad is None else x.grad + gx
        for v, param in self._leaves:
            if v.grad is not None:
                param.grad += v.grad.astype(param.grad.dtype, copy=False)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _wrap(op, out, inputs, backward):
    tape = _tape_of(*inputs)
    if tape is None:
        return out
    v = Var(out, tape)
    tape.record(op, inputs, v, backward)
    return v


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _shape(x):
    return np.shape(value(x))


def add(a, b):
    av, bv = value(a), value(b)
    return _wrap("add", av + bv, (a, b),
                 lambda g: (unbroadcast(g, _shape(a)), unbroadcast(g, _shape(b))))


def sub(a, b):
    av, bv = value(a), value(b)
    return _wrap("sub", av - bv, (a, b),
                 lambda g: (unbroadcast(g, _shape(a)), unbroadcast(-g, _shape(b))))


def mul(a, b):
    av, bv = value(a), value(b)

    def backward(g):
        ga = unbroadcast(g * bv, np.shape(av)) if isinstance(a, Var) else None
        gb = unbroadcast(g * av, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return _wrap("mul", av * bv, (a, b), backward)


def relu(x):
    xv = value(x)
    return _wrap("relu", np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),))


def abs(x):  # noqa: A001 - mirrors the numpy name
    xv = value(x)
    return _wrap("abs", np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def mean(x):
    xv = value(x)
    n = xv.size

    def backward(g):
        return (np.full(xv.shape, g.reshape(()) / n, dtype=xv.dtype),)

    return _wrap("mean", np.asarray(xv.mean(), dtype=xv.dtype), (x,), backward)


def sum(x):  # noqa: A001
    xv = value(x)
    return _wrap("sum", np.asarray(xv.sum(), dtype=xv.dtype), (x,),
                 lambda g: (np.full(xv.shape, g.reshape(()), dtype=xv.dtype),))


def concat(xs: Sequence, axis: int = 1):
    vals = [value(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def backward(g):
        out = []
        for i in range(len(vals)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _wrap("concat", np.concatenate(vals, axis=axis), tuple(xs), backward)


def softmax(x, axis: int):
    xv = value(x)
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _wrap("softmax", s, (x,), backward)


def getitem(x, index):
    xv = value(x)

    def backward(g):
        out = np.zeros_like(xv)
        out[index] = g
        return (out,)

    return _wrap("getitem", xv[index], (x,), backward)


def reshape(x, shape):
    xv = value(x)
    return _wrap("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def pixel_shuffle(x, r: int):
    return _wrap("pixel_shuffle", T.pixel_shuffle(value(x), r), (x,),
                 lambda g: (T.pixel_unshuffle(g, r),))


def upsample_nearest(x, r: int, size: Optional[tuple[int, int]] = None):
    """Nearest-neighbour ×r upsampling, cropped to ``size`` when given."""
    xv = value(x)
    up = xv.repeat(r, axis=2).repeat(r, axis=3)
    h, w = size if size is not None else up.shape[2:]
    out = np.ascontiguousarray(up[:, :, :h, :w])

    def backward(g):
        n, c, hi, wi = xv.shape
        full = np.zeros((n, c, hi * r, wi * r), dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full.reshape(n, c, hi, r, wi, r).sum(axis=(3, 5)),)

    return _wrap("upsample_nearest", out, (x,), backward)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    xv, wv = value(x), value(weight)
    bv = value(bias) if bias is not None else None
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {xv.shape} vs kernel {wv.shape}")
    n, _, h, w = xv.shape
    c_out, c_in, kh, kw = wv.shape
    ho = T.conv_output_size(h, kh, stride, padding)
    wo = T.conv_output_size(w, kw, stride, padding)
    cols = T.im2col(xv, kh, kw, stride, padding)
    wmat = wv.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if bv is not None:
        out = out + bv.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gw = gb = None
        if isinstance(x, Var):
            gx = T.col2im(wmat.T @ gmat, xv.shape, kh, kw, stride, padding)
        if isinstance(weight, Var):
            gw = (gmat @ cols.T).reshape(wv.shape)
        if isinstance(bias, Var):
            gb = gmat.sum(axis=1)
        return gx, gw, gb

    return _wrap("conv2d", out, (x, weight, bias), backward)


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()
