"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float32/float64 numpy array. Operations on
tensors record their operands and an adjoint rule on the output node;
``Tensor.backward()`` replays those records once each, in reverse
topological order, accumulating gradients into every reachable leaf
with ``requires_grad=True``.

Only the operations the segmentation network needs are provided:
3D convolution (stride 1/2, dilation 1/2/4, cubic kernels of size 1
or 3), nearest-neighbor upsampling by 2, dense layers, the activation
set, channel concatenation/slicing, global average pooling and the
elementwise/reduction arithmetic used by the losses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, PreconditionError

_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()

# Test hook: name of an op whose backward rule is deliberately corrupted,
# used to prove the gradient checker reports failures. Never set in
# normal operation.
_backward_fault: str | None = None

# An adjoint rule maps the output gradient to (parent, parent_grad) pairs.
GradFn = Callable[[np.ndarray], list]


def set_backward_fault(op_name: str | None) -> None:
    global _backward_fault
    _backward_fault = op_name


def _faulty(op_name: str) -> bool:
    return _backward_fault == op_name


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in _FLOAT_DTYPES:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=_DEFAULT_DTYPE)


class Tensor:
    """N-dimensional real array, optionally tracked for differentiation.

    ``data`` is immutable by convention once the tensor has been consumed
    by an operation; only the optimizer mutates leaf ``data`` between
    steps, and only ``backward`` touches ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim > 5:
            raise PreconditionError(f"tensor rank {self.data.ndim} exceeds 5")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise PreconditionError(
                f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable ``requires_grad`` leaf.

        Requires a scalar (single-element) tensor. Repeated calls
        accumulate into existing gradient buffers.
        """
        if self.size != 1:
            raise PreconditionError(
                f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._grad_fn(g):
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order; iterative to tolerate deep graphs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor],
          grad_fn: GradFn | None) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient contributions over axes that numpy broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise PreconditionError(
            f"shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(da(g), a.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(db(g), b.shape)))
        return pairs

    return _node(data, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: [(a, -g)])


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise combine; ``b`` may broadcast (e.g. per-channel vector)."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise PreconditionError(f"unknown elementwise op {op!r}")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # ties route their gradient to the first operand
    mask = a.data >= b.data
    return _binary(a, b, np.maximum,
                   lambda g: g * mask, lambda g: g * ~mask)


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: [(a, g * np.sign(a.data))])


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum(dtype=a.dtype)), (a,),
                 lambda g: [(a, np.full(a.shape, g, dtype=a.dtype))])


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.asarray(a.data.mean(dtype=a.dtype)), (a,),
                 lambda g: [(a, np.full(a.shape, g / n, dtype=a.dtype))])


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(ge, a.shape).astype(a.dtype, copy=False))]
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return sum_axis(a, axis, keepdims) * (1.0 / a.shape[axis])


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,),
                 lambda g: [(a, g.reshape(a.shape))])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise PreconditionError(
            f"slice [{start}:{start + length}) out of range for extent "
            f"{a.shape[axis]} on axis {axis}")
    idx = tuple(slice(None) if ax != axis else slice(start, start + length)
                for ax in range(a.ndim))

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        return [(a, full)]
    return _node(a.data[idx].copy(), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise PreconditionError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[ax] != ref[ax] for ax in range(len(ref)) if ax != axis):
            raise PreconditionError(
                f"concat extents differ off axis {axis}: {ref} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = tuple(slice(None) if ax != axis else slice(lo, hi)
                            for ax in range(t.ndim))
                pairs.append((t, g[idx]))
        return pairs
    return _node(data, tuple(tensors), grad_fn)


def repeat_channels(a: Tensor, repeats: int) -> Tensor:
    """[N, C] -> [N, C*repeats], each entry repeated consecutively."""
    if a.ndim != 2:
        raise PreconditionError(f"expected rank-2 input, got {a.shape}")
    return _node(np.repeat(a.data, repeats, axis=1), (a,),
                 lambda g: [(a, g.reshape(a.shape[0], a.shape[1],
                                          repeats).sum(axis=2))])


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    return _node(np.maximum(a.data, 0), (a,),
                 lambda g: [(a, g * (a.data > 0))])


LEAKY_SLOPE = 0.01


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    data = np.where(a.data > 0, a.data, a.data * slope)
    return _node(data, (a,),
                 lambda g: [(a, np.where(a.data > 0, g, g * slope))])


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data).astype(a.dtype, copy=False)
    return _node(s, (a,), lambda g: [(a, g * s * (1 - s))])


def softmax_channel(a: Tensor) -> Tensor:
    """Softmax along axis 1 of a rank-5 tensor."""
    if a.ndim != 5:
        raise PreconditionError(
            f"channel softmax expects rank-5 input, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = (e / e.sum(axis=1, keepdims=True)).astype(a.dtype, copy=False)

    def grad_fn(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return [(a, p * (g - dot))]
    return _node(p, (a,), grad_fn)


def activation(a: Tensor, kind: str) -> Tensor:
    if not np.isfinite(a.data).all():
        raise PreconditionError(f"non-finite values entering {kind}")
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softmax_channel":
        return softmax_channel(a)
    raise PreconditionError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# spatial ops


def global_avg_pool(a: Tensor) -> Tensor:
    """[N,C,D,H,W] -> [N,C], mean over all spatial positions."""
    if a.ndim != 5:
        raise PreconditionError(
            f"global_avg_pool expects rank-5 input, got {a.shape}")
    vox = a.shape[2] * a.shape[3] * a.shape[4]

    def grad_fn(g):
        return [(a, np.broadcast_to((g / vox)[:, :, None, None, None],
                                    a.shape).astype(a.dtype))]
    return _node(a.data.mean(axis=(2, 3, 4)), (a,), grad_fn)


def upsample_nn(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of each spatial axis."""
    if factor != 2:
        raise ConfigurationError(
            f"only factor-2 upsampling is supported, got {factor}")
    if a.ndim != 5:
        raise PreconditionError(
            f"upsample expects rank-5 input, got {a.shape}")
    n, c, d, h, w = a.shape
    data = np.broadcast_to(
        a.data[:, :, :, None, :, None, :, None],
        (n, c, d, 2, h, 2, w, 2)).reshape(n, c, 2 * d, 2 * h, 2 * w)

    def grad_fn(g):
        return [(a, g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)))]
    return _node(data, (a,), grad_fn)


def avg_pool2(a: Tensor) -> Tensor:
    """Factor-2 average pooling; inverse pair of ``upsample_nn``."""
    n, c, d, h, w = a.shape
    if d % 2 or h % 2 or w % 2:
        raise PreconditionError(f"extents must be even, got {a.shape}")
    data = a.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(
        axis=(3, 5, 7)).astype(a.dtype, copy=False)

    def grad_fn(g):
        ge = (g / 8.0)[:, :, :, None, :, None, :, None]
        return [(a, np.broadcast_to(ge, (n, c, d // 2, 2, h // 2, 2,
                                         w // 2, 2)).reshape(a.shape).astype(
            a.dtype))]
    return _node(data, (a,), grad_fn)


def dense(a: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis: a[..., Cin] @ w[Cout, Cin].T + b."""
    if w.ndim != 2:
        raise PreconditionError(f"dense weights must be rank 2, got {w.shape}")
    if a.shape[-1] != w.shape[1]:
        raise PreconditionError(
            f"dense input extent {a.shape[-1]} != weight fan-in {w.shape[1]}")
    data = a.data @ w.data.T
    if b is not None:
        data = data + b.data

    def grad_fn(g):
        pairs = []
        g2 = g.reshape(-1, w.shape[0])
        if a.requires_grad:
            pairs.append((a, (g2 @ w.data).reshape(a.shape)))
        if w.requires_grad:
            pairs.append((w, g2.T @ a.data.reshape(-1, w.shape[1])))
        if b is not None and b.requires_grad:
            pairs.append((b, g2.sum(axis=0)))
        return pairs
    parents = (a, w) if b is None else (a, w, b)
    return _node(data, parents, grad_fn)


# ---------------------------------------------------------------------------
# 3D convolution

_CHUNK_ELEMS = 16 * 1024 * 1024  # im2col buffers above this run chunked


def conv_output_shape(spatial, k, stride, dilation, pad):
    return tuple((s + 2 * pad - dilation * (k - 1) - 1) // stride + 1
                 for s in spatial)


def _pad3(vol: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return vol
    return np.pad(vol, ((0, 0),) + ((pad, pad),) * 3)


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int):
    """Strided [C,od,oh,ow,k,k,k] view over a padded [C,d,h,w] volume."""
    eff = dilation * (k - 1) + 1
    if min(xp.shape[1:]) < eff:
        raise PreconditionError(
            f"padded extent {xp.shape[1:]} smaller than effective "
            f"kernel {eff}")
    win = np.lib.stride_tricks.sliding_window_view(
        xp, (eff, eff, eff), axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride,
               ::dilation, ::dilation, ::dilation]


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int):
    """Column matrix [C*k^3, P] for GEMM; P = output voxel count.

    Rows follow the kernel's (c, kd, kh, kw) layout; the volume sweep
    sits innermost so the strided copy stays cache-friendly.
    """
    win = _windows(xp, k, stride, dilation)
    cin = xp.shape[0]
    oshape = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, -1)
    return cols, oshape


def _corr3d(vol: np.ndarray, ker: np.ndarray, stride: int = 1,
            dilation: int = 1) -> np.ndarray:
    """Raw valid correlation of [C,d,h,w] with [F,C,k,k,k] -> [F,...]."""
    k = ker.shape[2]
    cols, oshape = _im2col(vol, k, stride, dilation)
    rows = ker.reshape(ker.shape[0], -1) @ cols
    return rows.reshape((ker.shape[0],) + oshape)


def _stuff(g: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between gradient voxels (transposed conv)."""
    if stride == 1:
        return g
    f, od, oh, ow = g.shape
    out = np.zeros((f, (od - 1) * stride + 1, (oh - 1) * stride + 1,
                    (ow - 1) * stride + 1), dtype=g.dtype)
    out[:, ::stride, ::stride, ::stride] = g
    return out


def _grad_input_gemm(gy: np.ndarray, w: np.ndarray, in_spatial, stride: int,
                     dilation: int, padding: int) -> np.ndarray:
    """Input gradient of one batch item via a correlation GEMM.

    Zero-stuffing the output gradient by the stride and correlating with
    the channel-swapped, spatially flipped kernel (padded by the full
    kernel reach) yields the gradient of the padded input; cropping the
    padding recovers the input gradient.
    """
    k = w.shape[2]
    gys = _pad3(_stuff(gy, stride), (k - 1) * dilation)
    wflip = np.ascontiguousarray(
        w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
    gxp = _corr3d(gys, wflip, stride=1, dilation=dilation)
    # positions past the last stride step were never read in the forward
    # pass, so gxp can be short of the padded extent; they stay zero
    out = np.zeros((w.shape[1],) + tuple(in_spatial), dtype=gy.dtype)
    cropped = gxp[:,
                  padding:padding + in_spatial[0],
                  padding:padding + in_spatial[1],
                  padding:padding + in_spatial[2]]
    out[:, :cropped.shape[1], :cropped.shape[2], :cropped.shape[3]] = cropped
    return out


def _grad_input_scatter(gy: np.ndarray, w: np.ndarray, in_spatial,
                        stride: int, dilation: int, padding: int,
                        chunk: int) -> np.ndarray:
    """Chunked scatter-add fallback (used when back_pad would be negative
    or the volume is too large for one buffer)."""
    f, cin, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, wd = (s + 2 * padding for s in in_spatial)
    od, oh, ow = gy.shape[1:]
    zd = np.arange(od, dtype=np.int64) * stride
    zh = np.arange(oh, dtype=np.int64) * stride
    zw = np.arange(ow, dtype=np.int64) * stride
    base = ((zd[:, None] * h + zh[None, :])[:, :, None] * wd
            + zw[None, None, :]).reshape(-1)
    kd = np.arange(k, dtype=np.int64) * dilation
    taps = ((kd[:, None] * h + kd[None, :])[:, :, None] * wd
            + kd[None, None, :]).reshape(-1)
    chan = np.arange(cin, dtype=np.int64) * (d * h * wd)
    off = (chan[:, None] + taps[None, :]).reshape(-1)
    wmat = w.reshape(f, -1)
    gmat = gy.reshape(f, -1)
    pnumel = cin * d * h * wd
    gp = np.zeros(pnumel, dtype=np.float64)
    for lo in range(0, base.size, chunk):
        hi = min(lo + chunk, base.size)
        gcols = gmat[:, lo:hi].T @ wmat
        idx = base[lo:hi, None] + off[None, :]
        gp += np.bincount(idx.reshape(-1),
                          weights=gcols.reshape(-1).astype(np.float64,
                                                           copy=False),
                          minlength=pnumel)
    gpv = gp.reshape(cin, d, h, wd)
    if padding:
        gpv = gpv[:, padding:-padding, padding:-padding, padding:-padding]
    return gpv.astype(gy.dtype, copy=False)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with symmetric zero padding.

    x: [N,C,D,H,W], w: [F,C,k,k,k] with k in {1,3}, b: [F] or None.
    Output spatial extent per axis:
    floor((S + 2*pad - dilation*(k-1) - 1) / stride) + 1.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise PreconditionError(
            f"conv3d expects rank-5 input and kernel, got {x.shape}, {w.shape}")
    f, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k not in (1, 3):
        raise PreconditionError(f"kernel must be cubic of size 1 or 3: {w.shape}")
    if x.shape[1] != cin:
        raise PreconditionError(
            f"input channels {x.shape[1]} (input {x.shape}) != kernel "
            f"channels {cin} (kernel {w.shape})")
    if stride not in (1, 2):
        raise PreconditionError(f"stride must be 1 or 2, got {stride}")
    if dilation not in (1, 2, 4):
        raise PreconditionError(f"dilation must be 1, 2 or 4, got {dilation}")

    n = x.shape[0]
    spatial = x.shape[2:]
    wmat = w.data.reshape(f, -1)

    if k == 1 and stride == 1 and padding == 0:
        # pointwise fast path: pure channel mixing, no gather needed
        xmat = x.data.reshape(n, cin, -1)
        data = np.matmul(wmat[None], xmat).reshape(n, f, *spatial)
        if b is not None:
            data += b.data[None, :, None, None, None]

        def grad_fn_pw(g):
            gmat = g.reshape(n, f, -1)
            if _faulty("conv3d"):
                gmat = gmat * 1.001
            pairs = []
            if x.requires_grad:
                gx = np.matmul(wmat.T[None], gmat)
                pairs.append((x, gx.reshape(x.shape)))
            if w.requires_grad:
                gw = np.einsum("nfv,ncv->fc", gmat, xmat)
                pairs.append((w, gw.reshape(w.shape).astype(w.dtype)))
            if b is not None and b.requires_grad:
                pairs.append((b, g.sum(axis=(0, 2, 3, 4))))
            return pairs
        parents = (x, w) if b is None else (x, w, b)
        return _node(data, parents, grad_fn_pw)

    oshape = conv_output_shape(spatial, k, stride, dilation, padding)
    p_total = int(np.prod(oshape))
    ck = cin * k ** 3
    small = p_total * ck <= _CHUNK_ELEMS
    eff = dilation * (k - 1) + 1
    if min(s + 2 * padding for s in spatial) < eff:
        raise PreconditionError(
            f"padded extent {tuple(s + 2 * padding for s in spatial)} "
            f"smaller than effective kernel {eff}")

    saved_cols: list[np.ndarray | None] = []
    track = grad_enabled() and (x.requires_grad or w.requires_grad
                                or (b is not None and b.requires_grad))
    data = np.empty((n, f) + oshape, dtype=x.dtype)
    for ni in range(n):
        xp = _pad3(x.data[ni], padding)
        if small:
            cols, _ = _im2col(xp, k, stride, dilation)
            saved_cols.append(cols if track else None)
            data[ni] = (wmat @ cols).reshape((f,) + oshape)
        else:
            saved_cols.append(None)
            win = _windows(xp, k, stride, dilation)
            od, oh, ow = oshape
            out = data[ni].reshape(f, od, oh * ow)
            step = max(1, _CHUNK_ELEMS // (ck * oh * ow))
            for lo in range(0, od, step):
                hi = min(lo + step, od)
                block = win[:, lo:hi].transpose(0, 4, 5, 6, 1, 2, 3).reshape(
                    ck, -1)
                out[:, lo:hi] = (wmat @ block).reshape(f, hi - lo, oh * ow)
    if b is not None:
        data += b.data[None, :, None, None, None]

    def grad_fn(g):
        need_x = x.requires_grad
        need_w = w.requires_grad
        if _faulty("conv3d"):
            g = g * 1.001
        gw = np.zeros_like(wmat) if need_w else None
        gx_full = np.empty(x.shape, dtype=x.dtype) if need_x else None
        for ni in range(n):
            gy = np.ascontiguousarray(g[ni])
            if need_w:
                cols = saved_cols[ni]
                if cols is not None:
                    gw += gy.reshape(f, -1) @ cols.T
                else:
                    win = _windows(_pad3(x.data[ni], padding), k, stride,
                                   dilation)
                    od, oh, ow = oshape
                    gyr = gy.reshape(f, od, oh * ow)
                    step = max(1, _CHUNK_ELEMS // (ck * oh * ow))
                    for lo in range(0, od, step):
                        hi = min(lo + step, od)
                        block = win[:, lo:hi].transpose(
                            0, 4, 5, 6, 1, 2, 3).reshape(ck, -1)
                        gw += gyr[:, lo:hi].reshape(f, -1) @ block.T
            if need_x:
                if small:
                    gx_full[ni] = _grad_input_gemm(
                        gy, w.data, spatial, stride, dilation, padding)
                else:
                    gx_full[ni] = _grad_input_scatter(
                        gy, w.data, spatial, stride, dilation, padding,
                        chunk=max(1, _CHUNK_ELEMS // ck))
        pairs = []
        if need_x:
            pairs.append((x, gx_full))
        if need_w:
            pairs.append((w, gw.reshape(w.shape)))
        if b is not None and b.requires_grad:
            pairs.append((b, g.sum(axis=(0, 2, 3, 4))))
        return pairs

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, grad_fn)


def backward(loss: Tensor) -> None:
    """Module-level alias of :meth:`Tensor.backward`."""
    loss.backward()
