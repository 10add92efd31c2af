"""Dense-tensor compute layer with reverse-mode differentiation.

Tensors wrap numpy arrays in NCHW layout (batch, channels, height, width)
for images and feature maps. Every operation that participates in training
records a backward closure on a tape; ``Tensor.backward`` walks the tape in
reverse topological order and accumulates gradients into leaf tensors.

Float64 is the default precision; float32 can be selected for speed via
``set_default_dtype`` but all tests and oracles run in 64-bit.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """A tensor extent does not satisfy an operation's shape contract."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. double backward)."""


_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/evaluation)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """N-dimensional real array plus optional autograd bookkeeping.

    Leaf tensors created with ``requires_grad=True`` own a persistent
    ``grad`` buffer (zero-initialized, so parameters unreachable from a loss
    read as zero gradient). Intermediate results carry their parents and a
    backward closure instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = None
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={_tracked(self)})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar, and each tape may be walked only once.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._done:
            raise ContractError("backward was already called on this tape")
        self._done = True

        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            gy = grads.pop(id(node), None)
            if gy is None:
                continue
            if node.requires_grad and node._parents is None:
                node.grad += gy
                continue
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(gy)):
                if g is None or not _tracked(parent):
                    continue
                if parent.requires_grad and parent._parents is None:
                    parent.grad += g
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


def backward(loss: Tensor) -> None:
    loss.backward()


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._parents is not None


def _toposort(root: Tensor):
    """Reverse topological order of the tape reachable from ``root``."""
    order = []
    seen = set()
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
        if node._parents:
            for p in node._parents:
                if id(p) not in seen and _tracked(p):
                    stack.append((p, False))
    order.reverse()
    return order


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(gy):
        return _unbroadcast(gy, a.shape), _unbroadcast(gy, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(gy):
        return _unbroadcast(gy, a.shape), _unbroadcast(-gy, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(gy):
        return (_unbroadcast(gy * b.data, a.shape),
                _unbroadcast(gy * a.data, b.shape))

    return _result(a.data * b.data, (a, b), back)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def back(gy):
        return (gy * s,)

    return _result(a.data * s, (a,), back)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def back(gy):
        return (gy * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), back)


def sum_all(a) -> Tensor:
    a = _wrap(a)

    def back(gy):
        return (np.full_like(a.data, float(gy)),)

    return _result(a.data.sum(), (a,), back)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def back(gy):
        return (gy.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(gy):
        return (gy.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat requires at least one input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise DimensionError(
                f"concat rank mismatch: {len(t.shape)} vs {len(ref)}")
        for ax, (ea, eb) in enumerate(zip(ref, t.shape)):
            if ax != axis and ea != eb:
                raise DimensionError(
                    f"concat extent mismatch on axis {ax}: {eb} vs {ea}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(gy):
        slicer = [slice(None)] * gy.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            slicer[axis] = slice(lo, hi)
            grads.append(gy[tuple(slicer)])
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, back)


def concat_channels(tensors) -> Tensor:
    """Concatenate NCHW feature maps along the channel axis."""
    return concat(tensors, axis=1)


def split(a, sizes, axis: int = 0):
    """Inverse of concat: cut ``a`` into chunks of the given extents."""
    a = _wrap(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(
            f"split sizes sum to {sum(sizes)} but axis {axis} has extent "
            f"{a.shape[axis]}")
    pieces = []
    lo = 0
    for size in sizes:
        hi = lo + size
        slicer = [slice(None)] * a.data.ndim
        slicer[axis] = slice(lo, hi)
        piece_slice = tuple(slicer)

        def back(gy, piece_slice=piece_slice):
            g = np.zeros_like(a.data)
            g[piece_slice] = gy
            return (g,)

        pieces.append(_result(a.data[piece_slice], (a,), back))
        lo = hi
    return pieces


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(gy):
        inner = (gy * y).sum(axis=-1, keepdims=True)
        return (y * (gy - inner),)

    return _result(y, (a,), back)


def log_softmax_rows(a) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(gy):
        return (gy - soft * gy.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), back)


def smooth_l1(a) -> Tensor:
    """Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = _wrap(a)
    absx = np.abs(a.data)
    inner = absx < 1.0
    out = np.where(inner, 0.5 * a.data * a.data, absx - 0.5)

    def back(gy):
        return (gy * np.where(inner, a.data, np.sign(a.data)),)

    return _result(out, (a,), back)


def select_rows(a, index) -> Tensor:
    """Gather rows of ``a`` along axis 0 by an integer index array."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)

    def back(gy):
        g = np.zeros_like(a.data)
        np.add.at(g, index, gy)
        return (g,)

    return _result(a.data[index], (a,), back)


def gather_elements(a, rows, cols) -> Tensor:
    """Pick one element per (row, col) pair from a 2-D tensor."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_elements needs a 2-D tensor, got rank {a.data.ndim}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def back(gy):
        g = np.zeros_like(a.data)
        np.add.at(g, (rows, cols), gy)
        return (g,)

    return _result(a.data[rows, cols], (a,), back)


def pad2d(a, pads, value: float = 0.0) -> Tensor:
    """Pad the two trailing spatial axes by (top, bottom, left, right)."""
    a = _wrap(a)
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise DimensionError(f"pad2d pads must be non-negative, got {pads}")
    width = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]
    h, w = a.shape[-2], a.shape[-1]

    def back(gy):
        return (gy[..., top:top + h, left:left + w],)

    return _result(np.pad(a.data, width, constant_values=value), (a,), back)


def crop2d(a, top: int, left: int, height: int, width: int) -> Tensor:
    """Cut a (height, width) window from the two trailing spatial axes."""
    a = _wrap(a)
    if top + height > a.shape[-2] or left + width > a.shape[-1]:
        raise DimensionError(
            f"crop2d window {(top, left, height, width)} exceeds input "
            f"extent {a.shape[-2:]}")

    def back(gy):
        g = np.zeros_like(a.data)
        g[..., top:top + height, left:left + width] = gy
        return (g,)

    return _result(a.data[..., top:top + height, left:left + width], (a,), back)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _check_image(x, op):
    if x.data.ndim != 4:
        raise DimensionError(
            f"{op} expects a 4-D NCHW input, got rank {x.data.ndim}")


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with bias.

    ``x`` is (N, C_in, H, W); ``kernel`` is (C_out, C_in, kH, kW). The
    forward runs as an im2col matrix product so the inner loop is a BLAS
    call; the backward reuses the column matrix.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    _check_image(x, "conv2d")
    if kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d kernel must be 4-D (C_out, C_in, kH, kW), got rank "
            f"{kernel.data.ndim}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d channel axis mismatch: input has {cin} channels, "
            f"kernel expects {kcin}")
    if bias.data.shape != (cout,):
        raise DimensionError(
            f"conv2d bias must have shape ({cout},), got {bias.data.shape}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d window {kh}x{kw} exceeds padded input {h + 2 * pad}x"
            f"{w + 2 * pad}")

    need_x = _tracked(x)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise conv: batched channel matmul, no column matrix
        x3 = x.data.reshape(n, cin, h * w)
        w2 = kernel.data.reshape(cout, cin)
        out = np.matmul(w2, x3).reshape(n, cout, h, w)
        out = out + bias.data.reshape(1, cout, 1, 1)

        def back1x1(gy):
            gy3 = gy.reshape(n, cout, h * w)
            gk = np.matmul(gy3, x3.swapaxes(1, 2)).sum(axis=0)
            gb = gy.sum(axis=(0, 2, 3))
            if not need_x:
                return None, gk.reshape(kernel.shape), gb
            gx = np.matmul(w2.T, gy3).reshape(n, cin, h, w)
            return gx, gk.reshape(kernel.shape), gb

        return _result(out, (x, kernel, bias), back1x1)

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C_in*kH*kW, N*Ho*Wo) column matrix shared by forward and backward
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, cout, 1, 1)

    def back(gy):
        gy2 = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(
            cout, n * ho * wo)
        gk = (gy2 @ cols.T).reshape(kernel.shape)
        gb = gy.sum(axis=(0, 2, 3))
        if not need_x:
            return None, gk, gb
        gcols = (w2.T @ gy2).reshape(cin, kh, kw, n, ho, wo)
        # hoist one contiguous copy so the scatter adds read sequentially
        gcols = np.ascontiguousarray(gcols.transpose(1, 2, 3, 0, 4, 5))
        gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    return _result(out, (x, kernel, bias), back)


def deconv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (fractionally strided upsampling).

    ``kernel`` is (C_in, C_out, kH, kW); the output spatial extent is
    (in - 1) * stride - 2 * pad + k. The gradient w.r.t. the input is a
    plain conv2d with the same kernel.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    _check_image(x, "deconv2d")
    if kernel.data.ndim != 4:
        raise DimensionError(
            f"deconv2d kernel must be 4-D (C_in, C_out, kH, kW), got rank "
            f"{kernel.data.ndim}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(
            f"deconv2d channel axis mismatch: input has {cin} channels, "
            f"kernel expects {kcin}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise DimensionError(
            f"deconv2d pad {pad} consumes the whole {hf}x{wf} output")

    x2 = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * w)
    k2 = kernel.data.reshape(cin, cout * kh * kw)
    cols = (k2.T @ x2).reshape(cout, kh, kw, n, h, w)
    full = np.zeros((n, cout, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    out = full[:, :, pad:hf - pad, pad:wf - pad] if pad else full

    need_x = _tracked(x)

    def back(gy):
        gyf = gy
        if pad:
            gyf = np.zeros((n, cout, hf, wf), dtype=gy.dtype)
            gyf[:, :, pad:hf - pad, pad:wf - pad] = gy
        win = sliding_window_view(gyf, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        gycols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cout * kh * kw, n * h * w)
        gk = (x2 @ gycols.T).reshape(kernel.shape)
        if not need_x:
            return None, gk
        gx = (k2 @ gycols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        return gx, gk

    return _result(out, (x, kernel), back)


def maxpool2d(x, k: int, stride: int) -> Tensor:
    """Windowed max over kxk patches; ties route gradient to the first
    (row-major) position within the window."""
    x = _wrap(x)
    _check_image(x, "maxpool2d")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(
            f"maxpool2d window {k}x{k} exceeds input extent {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(gy):
        gx = np.zeros_like(x.data)
        for p in range(k * k):
            i, j = divmod(p, k)
            contrib = gy * (arg == p)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        return (gx,)

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# parameters and SGD
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus per-parameter momentum buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}

    def register(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def momentum(self, name: str) -> np.ndarray:
        buf = self._momentum.get(name)
        if buf is None:
            buf = np.zeros_like(self._params[name].data)
            self._momentum[name] = buf
        return buf

    def momentum_items(self):
        return [(name, self.momentum(name)) for name in self._params]

    def n_values(self) -> int:
        """Total number of trainable scalars."""
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0


def sgd_momentum_step(params: ParamStore, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Gradients are cleared after the update.
    """
    for name, p in params.items():
        v = params.momentum(name)
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.grad[...] = 0.0
