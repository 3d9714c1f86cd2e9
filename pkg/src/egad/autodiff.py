"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives needed by the four GAN architectures live here: dense,
same-padded conv / transposed conv, batch norm, dropout, the five
activations, concat, reshape, and the two losses (stable sigmoid
cross-entropy and L1).

Recording is explicit::

    with Tape() as tape:
        loss = ops.sum(ops.dense(x, w, b))
    tape.backward(loss)

Outside an active tape every op is a plain forward computation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

LEAKY_SLOPE = 0.1
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "linear")

# Checked after every forward and every backward step. Turning this off
# buys a few percent of speed in long runs.
CHECK_FINITE = True

_active: list["Tape"] = []
_paused = 0


class Tensor:
    """An array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    ops: list[_Op] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active.pop()
        assert popped is self, "tapes must be closed in LIFO order"

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) back through every recorded op.

        Gradients are accumulated into ``.grad`` of every leaf that requires
        them. Tensors listed in ``wrt`` but unreachable from ``loss`` get a zero
        gradient. Returns a mapping ``id(leaf) -> gradient``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(op.out) for op in self.ops}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if CHECK_FINITE and not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient flowing out of {op.kind}")
                key = id(t)
                seen[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for key, g in grads.items():
            if key in produced:
                continue
            t = seen[key]
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
            leaves[key] = t.grad
        for t in wrt:
            if id(t) not in leaves:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                leaves[id(t)] = t.grad
        return leaves


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()):
    return tape.backward(loss, wrt)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on any active tape."""
    global _paused
    _paused += 1
    try:
        yield
    finally:
        _paused -= 1


def _record(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {kind}")
    out = Tensor(data)
    if _active and not _paused and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].ops.append(_Op(kind, inputs, out, bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record("sub", a.data - b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record("mean", np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in ts]} disagree off-axis"
            )
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


# -------------------------------------------------------------------- layers

def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [batch, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is None:
        def bw(g):
            return (g @ w.data.T if x.requires_grad else None,
                    x.data.T @ g if w.requires_grad else None)
        return _record("dense", out, (x, w), bw)

    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    out = out + b.data

    def bw(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _record("dense", out, (x, w, b), bw)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_conv(x_shape, k_shape, stride):
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}; only 1 and 2 are implemented")
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise ShapeError(f"conv expects NHWC input and HWIO kernel, got {x_shape} and {k_shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, tuple]:
    b, h, w, c = x.shape
    oh, ph0, ph1 = same_padding(h, kh, stride)
    ow, pw0, pw1 = same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, kh * kw * c)
    return cols, (xp.shape, oh, ow, ph0, pw0)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    b, h, w, c = x_shape
    oh, ph0, ph1 = same_padding(h, kh, stride)
    ow, pw0, pw1 = same_padding(w, kw, stride)
    cols = cols.reshape(b, oh, ow, kh, kw, c)
    xp = np.zeros((b, h + ph0 + ph1, w + pw0 + pw1, c), dtype=cols.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + hs:stride, j:j + ws:stride, :] += cols[:, :, :, i, j, :]
    return xp[:, ph0:ph0 + h, pw0:pw0 + w, :]


def conv2d(x, k, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation. ``x``: [b,h,w,c_in], ``k``: [kh,kw,c_in,c_out]."""
    x, k = as_tensor(x), as_tensor(k)
    _check_conv(x.shape, k.shape, stride)
    kh, kw, cin, cout = k.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    cols, (_, oh, ow, _, _) = _im2col(x.data, kh, kw, stride)
    kmat = k.data.reshape(-1, cout)
    out = (cols @ kmat).reshape(x.shape[0], oh, ow, cout)
    x_shape = x.shape

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = _col2im(g2 @ kmat.T, x_shape, kh, kw, stride) if x.requires_grad else None
        gk = (cols.T @ g2).reshape(k.shape) if k.requires_grad else None
        return gx, gk

    return _record("conv2d", out, (x, k), bw)


def conv2d_transpose(y, k, stride: int = 2, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``y``: [b,oh,ow,c_out], ``k``: [kh,kw,c_in,c_out]; the result has c_in
    channels and spatial size ``out_hw`` (default: input size times stride).
    """
    y, k = as_tensor(y), as_tensor(k)
    _check_conv(y.shape, k.shape, stride)
    kh, kw, cin, cout = k.shape
    if y.shape[3] != cout:
        raise ShapeError(f"conv2d_transpose: input has {y.shape[3]} channels, kernel expects {cout}")
    b, oh, ow, _ = y.shape
    h, w = out_hw if out_hw is not None else (oh * stride, ow * stride)
    if same_padding(h, kh, stride)[0] != oh or same_padding(w, kw, stride)[0] != ow:
        raise ShapeError(f"conv2d_transpose: {(oh, ow)} cannot come from a {(h, w)} map at stride {stride}")
    x_shape = (b, h, w, cin)
    kmat = k.data.reshape(-1, cout)
    y2 = y.data.reshape(-1, cout)
    out = _col2im(y2 @ kmat.T, x_shape, kh, kw, stride)

    def bw(g):
        cols, _ = _im2col(g, kh, kw, stride)
        gy = (cols @ kmat).reshape(y.shape) if y.requires_grad else None
        gk = (cols.T @ y2).reshape(k.shape) if k.requires_grad else None
        return gy, gk

    return _record("conv2d_transpose", out, (y, k), bw)


def batch_norm(x, gamma, beta, train: bool, running: dict, momentum: float = 0.99,
               eps: float = 1e-8) -> Tensor:
    """Normalise over every axis but the last.

    ``running`` holds ``mean`` and ``var`` arrays; train mode updates them in
    place as ``r <- momentum * r + (1 - momentum) * batch_stat``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running["mean"] *= momentum
        running["mean"] += (1 - momentum) * mu
        running["var"] *= momentum
        running["var"] += (1 - momentum) * var
    else:
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if train:
                gx = inv / n * (n * gxhat - gxhat.sum(axis=axes)
                                - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _record("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -v))


def sigmoid_np(v) -> np.ndarray:
    return _sigmoid(np.asarray(v, dtype=np.float64))


def activation(kind: str, x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if kind == "linear":
        return x
    if kind == "relu":
        out = np.maximum(d, 0)
        slope = (d > 0).astype(d.dtype)  # subgradient 0 at the kink
    elif kind == "leaky_relu":
        slope = np.where(d > 0, 1.0, LEAKY_SLOPE).astype(d.dtype)
        out = d * slope
    elif kind == "tanh":
        out = np.tanh(d)
        slope = 1.0 - out * out
    elif kind == "sigmoid":
        out = _sigmoid(d)
        slope = out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _record(kind, out, (x,), lambda g: (g * slope,))


# -------------------------------------------------------------------- losses

def _check_targets(t: np.ndarray) -> None:
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("cross-entropy targets must be 0 or 1")


def sigmoid_cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """``-[t log s(l) + (1-t) log(1-s(l))]`` in the overflow-free logit form.

    ``reduction='mean'`` averages over all elements; ``'none'`` keeps the
    elementwise losses.
    """
    logits = as_tensor(logits)
    l = logits.data
    t = np.broadcast_to(np.asarray(targets, dtype=l.dtype), l.shape)
    _check_targets(t)
    per = np.maximum(l, 0) - l * t + np.log1p(np.exp(-np.abs(l)))
    dper = _sigmoid(l) - t
    if reduction == "none":
        return _record("sigmoid_xent", per, (logits,), lambda g: (g * dper,))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    n = l.size
    return _record("sigmoid_xent", np.asarray(per.mean()), (logits,),
                   lambda g: (g * dper / n,))


def l1_distance(a, b, per_sample: bool = False) -> Tensor:
    """Sum of absolute differences.

    With ``per_sample`` the sum runs over every axis except the first and a
    vector of length ``batch`` comes back; otherwise a scalar.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    sgn = np.sign(diff)
    if per_sample:
        out = np.abs(diff).reshape(diff.shape[0], -1).sum(axis=1)

        def bw(g):
            gd = sgn * g.reshape((-1,) + (1,) * (diff.ndim - 1))
            return gd, -gd
    else:
        out = np.asarray(np.abs(diff).sum())

        def bw(g):
            return sgn * g, -sgn * g

    return _record("l1", out, (a, b), bw)
