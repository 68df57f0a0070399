"""Dense tensors with reverse-mode gradient accumulation.

Everything is plain numpy underneath. A :class:`Tensor` remembers the
tensors it was computed from and a closure that maps the upstream gradient
onto those parents; :func:`backward` walks that graph in reverse
topological order.

Precision follows the input arrays: float32 is the working default, float64
is used by the gradient checks.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "",
    ):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # arithmetic; tensor-tensor ops require identical shapes, python scalars broadcast
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


DiffTensor = Tensor


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        dtype=data.dtype,
        _parents=parents if needs else (),
        _backward=grad_fn if needs else None,
        op=op,
    )


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(result: Tensor) -> None:
    """Accumulate d(result)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Grads are added to existing buffers, so callers zero them between steps.
    """
    if result.data.size != 1:
        raise ShapeError(f"backward needs a scalar result, got shape {result.shape}")
    if not result.requires_grad:
        raise ValueError("result does not depend on any tensor with requires_grad=True")
    grads: dict[int, np.ndarray] = {id(result): np.ones_like(result.data)}
    for node in reversed(_topo_order(result)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def tsum(a: Tensor, axis: int | Iterable[int] | None = None) -> Tensor:
    if axis is not None and not isinstance(axis, int):
        axis = tuple(axis)
    out = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    s = tsum(a, axis)
    return mul_scalar(s, s.data.size / a.data.size)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; every other extent must agree."""
    if not tensors:
        raise ShapeError("concat_channels: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn, "concat")


# activations


def selu(x: Tensor) -> Tensor:
    d = x.data
    dt = d.dtype.type
    ex = np.exp(np.minimum(d, 0))
    pos = d > 0
    out = np.where(pos, dt(SELU_SCALE) * d, dt(SELU_SCALE * SELU_ALPHA) * (ex - 1))

    def grad_fn(g):
        return (g * np.where(pos, dt(SELU_SCALE), dt(SELU_SCALE * SELU_ALPHA) * ex),)

    return _make(out, (x,), grad_fn, "selu")


def _stable_sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    one = d.dtype.type(1)
    return np.where(d >= 0, one / (one + e), e / (one + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# convolutions


def _triple(v) -> tuple[int, int, int]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """3D cross-correlation. x: (N,C,D,H,W), w: (K,C,kd,kh,kw), b: (K,).

    Output extent per axis is floor((E + 2*padding - k) / stride) + 1.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    c = x.shape[1]
    k, kc, kd, kh, kw = w.shape
    if kc != c:
        raise ShapeError(f"conv3d: input has {c} channels but kernel expects {kc}")
    if b is not None and b.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {b.shape} does not match {k} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv3d: bad stride={stride} or padding={padding}")
    ext = tuple(e + 2 * padding for e in x.shape[2:])
    if kd > ext[0] or kh > ext[1] or kw > ext[2]:
        raise ShapeError(f"conv3d: kernel {w.shape[2:]} larger than padded input {ext}")
    if stride == 1:
        out, grad_xw = _conv_flat(x.data, w.data, padding)
    elif padding == 0 and (kd, kh, kw) == (stride,) * 3 and all(e % stride == 0 for e in ext):
        out, grad_xw = _conv_blocks(x.data, w.data, stride)
    else:
        out, grad_xw = _conv_windows(x.data, w.data, stride, padding)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def grad_fn(g):
        gx, gw = grad_xw(g, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, grad_fn, "conv3d")


def _conv_flat(xd: np.ndarray, wd: np.ndarray, p: int):
    """Stride-1 path. On the flattened padded grid every kernel tap is a plain
    shift, so the im2col rows are contiguous slices. Outputs are computed on
    the whole padded grid and the valid corner is cropped afterwards."""
    n, c, *_ = xd.shape
    k, _, kd, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    dp, hp, wp = xp.shape[2:]
    size = dp * hp * wp
    offs = [i * hp * wp + j * wp + l for i in range(kd) for j in range(kh) for l in range(kw)]
    span = size - offs[-1]
    od, oh, ow = dp - kd + 1, hp - kh + 1, wp - kw + 1
    xf = xp.reshape(n, c, size)
    taps = len(offs)
    wm = wd.reshape(k, c, taps).transpose(0, 2, 1).reshape(k, taps * c)

    def cols(i):
        buf = np.empty((taps, c, span), dtype=xd.dtype)
        for t, o in enumerate(offs):
            buf[t] = xf[i, :, o : o + span]
        return buf.reshape(taps * c, span)

    full = np.zeros((n, k, size), dtype=np.result_type(xd, wd))
    for i in range(n):
        np.matmul(wm, cols(i), out=full[i, :, :span])
    out = np.ascontiguousarray(full.reshape(n, k, dp, hp, wp)[:, :, :od, :oh, :ow])

    def grad_xw(g, need_x, need_w):
        gfull = np.zeros((n, k, dp, hp, wp), dtype=g.dtype)
        gfull[:, :, :od, :oh, :ow] = g
        gfull = gfull.reshape(n, k, size)[:, :, :span]
        gx = gw = None
        if need_w:
            gwm = np.zeros_like(wm)
            for i in range(n):
                gwm += gfull[i] @ cols(i).T
            gw = gwm.reshape(k, taps, c).transpose(0, 2, 1).reshape(wd.shape)
        if need_x:
            gxf = np.zeros((n, c, size), dtype=g.dtype)
            for i in range(n):
                gcols = (wm.T @ gfull[i]).reshape(taps, c, span)
                for t, o in enumerate(offs):
                    gxf[i, :, o : o + span] += gcols[t]
            gx = gxf.reshape(xp.shape)
            if p:
                gx = gx[:, :, p:-p, p:-p, p:-p]
        return gx, gw

    return out, grad_xw


def _conv_blocks(xd: np.ndarray, wd: np.ndarray, s: int):
    """Kernel == stride, no padding: disjoint s^3 blocks, one reshape + matmul."""
    n, c, d, h, wdt = xd.shape
    k = wd.shape[0]
    bd, bh, bw = d // s, h // s, wdt // s
    # (N, bd, bh, bw, C, s, s, s)
    blocks = xd.reshape(n, c, bd, s, bh, s, bw, s).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    cols = blocks.reshape(n * bd * bh * bw, c * s**3)
    wm = wd.reshape(k, c * s**3)
    out = (cols @ wm.T).reshape(n, bd, bh, bw, k).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    def grad_xw(g, need_x, need_w):
        gl = g.transpose(0, 2, 3, 4, 1).reshape(-1, k)
        gx = gw = None
        if need_w:
            gw = (gl.T @ cols).reshape(wd.shape)
        if need_x:
            gb = (gl @ wm).reshape(n, bd, bh, bw, c, s, s, s)
            gx = np.ascontiguousarray(gb.transpose(0, 4, 1, 5, 2, 6, 3, 7)).reshape(xd.shape)
        return gx, gw

    return out, grad_xw


def _conv_windows(xd: np.ndarray, wd: np.ndarray, s: int, p: int):
    """General strided/padded path through sliding_window_view."""
    kd, kh, kw = wd.shape[2:]
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd

    def windows():
        v = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
        return v[:, :, ::s, ::s, ::s]

    out = np.tensordot(windows(), wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (N,D',H',W',K)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    od, oh, ow = out.shape[2:]

    def grad_xw(g, need_x, need_w):
        gl = g.transpose(0, 2, 3, 4, 1)
        gx = gw = None
        if need_w:
            gw = np.tensordot(gl, windows(), axes=([0, 1, 2, 3], [0, 2, 3, 4]))
        if need_x:
            cols = np.tensordot(gl, wd, axes=([4], [0]))  # (N,D',H',W',C,kd,kh,kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        gxp[:, :, i : i + s * od : s, j : j + s * oh : s, l : l + s * ow : s] += (
                            cols[..., i, j, l].transpose(0, 4, 1, 2, 3)
                        )
            gx = gxp
            if p:
                gx = gx[:, :, p:-p, p:-p, p:-p]
        return gx, gw

    return out, grad_xw


def conv3d_transposed(x: Tensor, w: Tensor, stride: int, b: Tensor | None = None) -> Tensor:
    """Non-overlapping transposed convolution (kernel extent == stride).

    x: (N,C,D,H,W), w: (C,K,s,s,s) -> (N,K,sD,sH,sW). Each input voxel
    scatters ``x[c] * w[c, k]`` into its own s^3 output block.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d_transposed expects 5-D tensors, got {x.shape} and {w.shape}")
    n, c, d, h, wd = x.shape
    wc, k, *kern = w.shape
    if wc != c:
        raise ShapeError(f"conv3d_transposed: input has {c} channels but kernel expects {wc}")
    if any(e != stride for e in kern):
        raise ShapeError(f"conv3d_transposed: kernel extent {tuple(kern)} must equal stride {stride}")
    if b is not None and b.shape != (k,):
        raise ShapeError(f"conv3d_transposed: bias shape {b.shape} does not match {k}")
    s = stride
    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N,D,H,W,K,s,s,s)
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, k, d * s, h * s, wd * s)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    else:
        out = np.ascontiguousarray(out)

    def grad_fn(g):
        gr = g.reshape(n, k, d, s, h, s, wd, s)
        gx = gw = gb = None
        if x.requires_grad:
            # (N,D,H,W,C)
            gx = np.tensordot(gr, w.data, axes=([1, 3, 5, 7], [1, 2, 3, 4]))
            gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
        if w.requires_grad:
            # (C, K, s, s, s)
            gw = np.tensordot(x.data, gr, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, grad_fn, "conv3d_transposed")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
