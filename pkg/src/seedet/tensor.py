"""Dense tensors with reverse-mode automatic differentiation.

The operator set covers exactly what a single-stage 3D anchor detector
needs: plain and transposed 3D convolution, max pooling, global average
pooling, batch normalization, dense layers, and a small elementwise suite.
Every operator records an entry on a global tape; :func:`backward` replays
the tape in reverse execution order (which is a valid reverse topological
order by construction) and accumulates gradients on leaf tensors.

Non-finite values anywhere -- forward outputs or gradients -- raise
:class:`NumericError` at the op that produced them, so divergence surfaces
at its origin rather than three layers downstream.
"""

from __future__ import annotations

from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


_TAPE: list["_TapeEntry"] = []
_grad_enabled = True


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class _TapeEntry:
    """One recorded op: output, inputs, and a closure computing input grads."""

    __slots__ = ("out", "inputs", "fn", "name")

    def __init__(self, out, inputs, fn, name):
        self.out: Tensor = out
        self.inputs: tuple[Tensor, ...] = inputs
        self.fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = fn
        self.name: str = name


class no_grad:
    """Context manager: ops inside compute values but record nothing."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def tape_size() -> int:
    return sum(1 for e in _TAPE if e is not None)


def clear_tape() -> None:
    """Drop all recorded entries. Call between training steps."""
    _TAPE.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_creator")

    # make ndarray <op> Tensor defer to our reflected operators instead of
    # numpy trying to coerce the Tensor itself
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # leaf grad accumulator, present iff requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(arr) if self.requires_grad else None
        )
        self._creator: Optional[_TapeEntry] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._creator = None
        return t

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; divide by a constant")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], fn, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor._wrap(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        entry = _TapeEntry(out, inputs, fn, name)
        out._creator = entry
        _TAPE.append(entry)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- backward pass ----------------------------------------------------------


def backward(loss: Tensor, free_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    Walks the tape in reverse execution order; because every op's inputs
    were created before its output, each tensor's downstream consumers are
    all processed before its own creator entry, so gradients are complete
    when propagated. Repeated calls accumulate into leaf grads.

    With `free_tape`, each entry is released as soon as its gradient has
    been propagated, so activations are freed mid-walk instead of living
    until clear_tape; the training loop uses this to keep peak memory at
    roughly one layer's activations instead of the whole network's.
    A freed tape cannot be walked a second time.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen_outputs: set[int] = set()
    for pos in range(len(_TAPE) - 1, -1, -1):
        entry = _TAPE[pos]
        if entry is None:  # already released by an earlier free_tape walk
            continue
        oid = id(entry.out)
        assert oid not in seen_outputs, "tape recorded one tensor twice (cycle?)"
        seen_outputs.add(oid)
        g = grads.pop(oid, None)
        if g is not None:
            input_grads = entry.fn(g)
            for t, gi in zip(entry.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(gi, f"gradient from {entry.name}")
                if t._creator is None:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi.astype(t.data.dtype, copy=False)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        if free_tape:
            entry.out._creator = None
            _TAPE[pos] = None


# -- elementwise and shape ops ----------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def fn(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(data, (a, b), fn, "add")


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(data, (a, b), fn, "mul")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _record(data, (x,), fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # evaluate on the stable side of the exp to avoid overflow either way
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def fn(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), fn, "sigmoid")


def texp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes a NumericError below
        data = np.exp(x.data)

    def fn(g):
        return (g * data,)

    return _record(data, (x,), fn, "exp")


def tlog(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    xd = x.data

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / xd,)

    return _record(data, (x,), fn, "log")


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** c for a constant exponent c (c == 0 gives ones with zero grad)."""
    c = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        data = np.power(x.data, c)
    xd = x.data

    def fn(g):
        if c == 0.0:
            return (np.zeros_like(xd),)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return (g * c * np.power(xd, c - 1.0),)

    return _record(data, (x,), fn, "power")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through where lo <= x <= hi."""
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def fn(g):
        return (g * mask,)

    return _record(data, (x,), fn, "clip")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 if |x| < 1 else |x| - 0.5."""
    ax = np.abs(x.data)
    inner = ax < 1.0
    data = np.where(inner, 0.5 * x.data * x.data, ax - 0.5)
    xd = x.data

    def fn(g):
        return (g * np.where(inner, xd, np.sign(xd)),)

    return _record(data, (x,), fn, "smooth_l1")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)
    xsh = x.data.shape

    def fn(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(xsh)), xsh).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(xsh) for a in axes)
            shape = tuple(1 if i in axes else n for i, n in enumerate(xsh))
            g = g.reshape(shape)
        return (np.broadcast_to(g, xsh).copy(),)

    return _record(data, (x,), fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    xsh = x.data.shape

    def fn(g):
        return (g.reshape(xsh),)

    return _record(data, (x,), fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(data, (x,), fn, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    data = x.data[idx]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)
    else:
        data = data.copy()  # decouple from x's buffer
    xsh = x.data.shape
    xdt = x.data.dtype

    def fn(g):
        gx = np.zeros(xsh, dtype=xdt)
        np.add.at(gx, idx, g)  # unbuffered: repeated indices accumulate
        return (gx,)

    return _record(data, (x,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(data, tensors, fn, "concat")


# -- dense / attention ops ---------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [N, Cin] @ weight [Cout, Cin]^T (+ bias [Cout])."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError("dense expects x [N,Cin] and weight [Cout,Cin]")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    xd, wd = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record(data, inputs, fn, "dense")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,D,H,W] -> [N,C], mean over the spatial axes."""
    if x.data.ndim != 5:
        raise ValueError("global_avg_pool expects a 5D tensor")
    n, c, d, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3, 4))
    scale = 1.0 / (d * h * w)

    def fn(g):
        return (np.broadcast_to(g[:, :, None, None, None] * scale, (n, c, d, h, w)).copy(),)

    return _record(data, (x,), fn, "global_avg_pool")


def scale_channels(u: Tensor, s: Tensor) -> Tensor:
    """Multiply feature map u [N,C,D,H,W] by per-channel gates s [N,C]."""
    if u.data.ndim != 5 or s.data.ndim != 2 or u.data.shape[:2] != s.data.shape:
        raise ValueError("scale_channels expects u [N,C,D,H,W] and s [N,C]")
    se = s.data[:, :, None, None, None]
    data = u.data * se
    ud, sd = u.data, s.data

    def fn(g):
        gu = g * sd[:, :, None, None, None]
        gs = (g * ud).sum(axis=(2, 3, 4))
        return gu, gs

    return _record(data, (u, s), fn, "scale_channels")


# -- convolution --------------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    ext = (size + 2 * pad - k) // stride + 1
    if ext <= 0:
        raise ValueError(
            f"convolution output extent {ext} <= 0 (size={size}, k={k}, stride={stride}, pad={pad})"
        )
    return ext


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _conv3d_gather(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Core correlation: x [N,A,...], w [B,A,kd,kh,kw] -> [N,B,...].

    Decomposes the kernel into k^3 offsets; each offset contributes one
    matmul between the [B,A] kernel slice and a strided view of x. The
    accumulator lives in [B,N,...] layout so each tensordot adds in place.
    """
    n, cin, d, h, wd_ = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel expects {cin_w}")
    od = _conv_out_extent(d, kd, stride, pad)
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(wd_, kw, stride, pad)
    xp = _pad_spatial(x, pad)
    out = np.zeros((cout, n, od, oh, ow), dtype=x.dtype)
    s = stride
    for a, b, c in product(range(kd), range(kh), range(kw)):
        sl = xp[:, :, a : a + s * od : s, b : b + s * oh : s, c : c + s * ow : s]
        out += np.tensordot(w[:, :, a, b, c], sl, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _conv3d_scatter(
    y: np.ndarray, w: np.ndarray, stride: int, pad: int, out_spatial: tuple[int, int, int]
) -> np.ndarray:
    """Adjoint of :func:`_conv3d_gather`: y [N,B,...] -> [N,A,out_spatial].

    Used both for conv3d's input gradient (out_spatial = input extents) and
    as the forward map of conv3d_transpose.
    """
    n, cout, od, oh, ow = y.shape
    cout_w, cin, kd, kh, kw = w.shape
    if cout != cout_w:
        raise ValueError(f"channel mismatch: input {cout}, kernel expects {cout_w}")
    d, h, wd_ = out_spatial
    s = stride
    buf = np.zeros((cin, n, d + 2 * pad, h + 2 * pad, wd_ + 2 * pad), dtype=y.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        contrib = np.tensordot(w[:, :, a, b, c], y, axes=([0], [1]))  # [A,N,...]
        buf[:, :, a : a + s * od : s, b : b + s * oh : s, c : c + s * ow : s] += contrib
    if pad:
        buf = buf[:, :, pad : pad + d, pad : pad + h, pad : pad + wd_]
    return np.ascontiguousarray(buf.transpose(1, 0, 2, 3, 4))


def _conv3d_weight_grad(
    upstream: np.ndarray, source: np.ndarray, stride: int, pad: int, kshape
) -> np.ndarray:
    """d(conv)/d(w): upstream [N,B,...] against padded-source windows [N,A,...]."""
    cout = upstream.shape[1]
    cin, kd, kh, kw = kshape
    _, _, od, oh, ow = upstream.shape
    sp = _pad_spatial(source, pad)
    s = stride
    gw = np.zeros((cout, cin, kd, kh, kw), dtype=upstream.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        sl = sp[:, :, a : a + s * od : s, b : b + s * oh : s, c : c + s * ow : s]
        gw[:, :, a, b, c] = np.tensordot(upstream, sl, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """3D cross-correlation. x [N,Cin,D,H,W], weight [Cout,Cin,kd,kh,kw].

    Output extent per axis is (size + 2*pad - k)//stride + 1; a 1x1x1 kernel
    of ones with stride 1 and pad 0 is the identity per channel pair.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError("conv3d expects x [N,Cin,D,H,W] and weight [Cout,Cin,kd,kh,kw]")
    if x.data.dtype != weight.data.dtype:
        raise TypeError(f"dtype mismatch: x {x.data.dtype} vs weight {weight.data.dtype}")
    data = _conv3d_gather(x.data, weight.data, stride, pad)
    if bias is not None:
        data += bias.data[None, :, None, None, None]
    xd, wd = x.data, weight.data
    in_spatial = x.data.shape[2:]
    kshape = weight.data.shape[1:]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx = _conv3d_scatter(g, wd, stride, pad, in_spatial)
        gw = _conv3d_weight_grad(g, xd, stride, pad, kshape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _record(data, inputs, fn, "conv3d")


def conv3d_transpose(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 3D convolution (adjoint of conv3d with the same weight).

    x [N,Cin,D,H,W], weight [Cin,Cout,kd,kh,kw]; output extent per axis is
    (size-1)*stride - 2*pad + k. With k=2, stride=2, pad=0 this exactly
    doubles each spatial extent.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError("conv3d_transpose expects x [N,Cin,D,H,W] and weight [Cin,Cout,k,k,k]")
    if x.data.dtype != weight.data.dtype:
        raise TypeError(f"dtype mismatch: x {x.data.dtype} vs weight {weight.data.dtype}")
    n, cin, d, h, w_ = x.data.shape
    cin_w, cout, kd, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel expects {cin_w}")
    out_spatial = tuple((s_ - 1) * stride - 2 * pad + k for s_, k in zip((d, h, w_), (kd, kh, kw)))
    if min(out_spatial) <= 0:
        raise ValueError(f"transposed conv output extent {out_spatial} has a non-positive entry")
    data = _conv3d_scatter(x.data, weight.data, stride, pad, out_spatial)
    xd, wd = x.data, weight.data
    kshape = weight.data.shape[1:]

    def fn(g):
        # adjoint pair: the input grad is a plain gather with the same kernel
        gx = _conv3d_gather(g, wd, stride, pad)
        # weight grad: same contraction as conv3d's, with roles swapped
        gw = _conv3d_weight_grad(xd, g, stride, pad, (cout,) + kshape[1:])
        return gx, gw

    return _record(data, (x, weight), fn, "conv3d_transpose")


def max_pool3d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max pooling over k^3 windows. Extents must tile exactly:
    (size - k) % stride == 0 (no implicit padding). Gradient routes to the
    first maximal element of each window in row-major window order.
    """
    if x.data.ndim != 5:
        raise ValueError("max_pool3d expects a 5D tensor")
    n, c, d, h, w = x.data.shape
    for size in (d, h, w):
        if size < k or (size - k) % stride != 0:
            raise ValueError(
                f"max_pool3d: extent {size} does not tile with k={k}, stride={stride}"
            )
    od, oh, ow = ((s_ - k) // stride + 1 for s_ in (d, h, w))
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]  # [N,C,od,oh,ow,k,k,k]
    flat = win.reshape(n, c, od, oh, ow, k * k * k)
    arg = flat.argmax(axis=-1)  # first max wins ties
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    xdt = x.data.dtype

    def fn(g):
        gwin = np.zeros((n, c, od, oh, ow, k * k * k), dtype=xdt)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(n, c, od, oh, ow, k, k, k)
        gx = np.zeros((n, c, d, h, w), dtype=xdt)
        s = stride
        for a, b, cc in product(range(k), range(k), range(k)):
            gx[:, :, a : a + s * od : s, b : b + s * oh : s, cc : cc + s * ow : s] += gwin[
                :, :, :, :, :, a, b, cc
            ]
        return (gx,)

    return _record(np.ascontiguousarray(data), (x,), fn, "max_pool3d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over [N,C,D,H,W].

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place:
    running = (1 - momentum) * running + momentum * batch. Eval mode uses
    the running buffers and treats them as constants.
    """
    if x.data.ndim != 5:
        raise ValueError("batch_norm expects a 5D tensor")
    n, c, d, h, w = x.data.shape
    axes = (0, 2, 3, 4)
    gd, bd = gamma.data, beta.data

    if training:
        count = n * d * h * w
        if count < 2:
            raise ValueError("batch_norm training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None, None]) * ivar[None, :, None, None, None]
        data = gd[None, :, None, None, None] * xhat + bd[None, :, None, None, None]
        xc = x.data - mean[None, :, None, None, None]

        def fn(g):
            dxhat = g * gd[None, :, None, None, None]
            dvar = (dxhat * xc).sum(axis=axes) * -0.5 * ivar**3
            dmean = -(dxhat.sum(axis=axes)) * ivar + dvar * (-2.0 / count) * xc.sum(axis=axes)
            gx = (
                dxhat * ivar[None, :, None, None, None]
                + (2.0 / count) * dvar[None, :, None, None, None] * xc
                + (dmean / count)[None, :, None, None, None]
            )
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta

        return _record(data, (x, gamma, beta), fn, "batch_norm")

    ivar = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None, None]) * ivar[None, :, None, None, None]
    data = gd[None, :, None, None, None] * xhat + bd[None, :, None, None, None]

    def fn_eval(g):
        gx = g * (gd * ivar)[None, :, None, None, None]
        ggamma = (g * xhat).sum(axes)
        gbeta = g.sum(axes)
        return gx, ggamma, gbeta

    return _record(data, (x, gamma, beta), fn_eval, "batch_norm")
