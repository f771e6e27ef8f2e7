"""Dense rank-4 tensor kernel with a reverse-mode tape.

Every tensor carries a numpy array.  Operations executed while a :class:`Tape`
is active, and whose inputs require gradients, are appended to the tape with a
closure that pushes the output gradient back to the inputs.  ``Tape.backward``
replays the closures in exact reverse order.  Leaf gradients accumulate; they
are only cleared by ``ParamStore.zero_grad``.

Precision is global: float32 for training, float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32
_local = threading.local()


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    global _dtype
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    """A numpy array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], None]
    op: str


class Tape:
    """Ordered record of forward operations.  Use as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._previous: Tape | None = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.out.grad = None
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad += 1.0
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.out.grad is not None:
                node.backward(node.out.grad)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = getattr(_local, "tape", None)
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None],
           op: str = "") -> Tensor:
    """Wrap ``data`` as an op output and register ``backward`` on the active tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.nodes.append(_Node(out, tuple(inputs), backward, op))
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape) if g.shape != t.shape else g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- params


class ParamStore:
    """Named parameter slots.  Each slot is a leaf tensor with a grad buffer."""

    def __init__(self) -> None:
        self._slots: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._slots:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(value, requires_grad=True, name=name)
        t.requires_grad = trainable
        self._slots[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self):
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def items(self):
        return self._slots.items()

    def names(self) -> list[str]:
        return list(self._slots)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        # Frozen slots stop recording on the tape; their buffers stay allocated.
        self._trainable[name] = flag
        self._slots[name].requires_grad = flag

    def set_trainable_where(self, predicate: Callable[[str], bool]) -> None:
        for name in self._slots:
            self.set_trainable(name, bool(predicate(name)))

    def zero_grad(self) -> None:
        for t in self._slots.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0.0

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._slots.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._slots.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != {t.shape}")
            t.data[...] = value

    def num_values(self) -> int:
        return sum(t.data.size for t in self._slots.values())


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        accumulate(a, _unbroadcast(g, sa))
        accumulate(b, _unbroadcast(g, sb))

    return record(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, sa))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, sb))

    return record(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * c, (x,), lambda g: accumulate(x, g * c), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                  lambda g: accumulate(x, g * mask), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: accumulate(x, g * s * (1.0 - s)), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return record(e, (x,), lambda g: accumulate(x, g * e), "exp")


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: accumulate(x, g / x.data), "log")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                  lambda g: accumulate(x, np.broadcast_to(g, shape)), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return record(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                  lambda g: accumulate(x, np.broadcast_to(g / n, shape)), "mean")


# --------------------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: accumulate(x, g.reshape(src)),
                  "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing with a scatter-add backward."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        accumulate(x, full)

    return record(np.ascontiguousarray(x.data[index]), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [t for t in tensors if t is not None]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accumulate(t, g[tuple(sl)])

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward,
                  "concat")


# --------------------------------------------------------------------------- dense ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``w @ x + b`` for a vector ``x`` of length ``in``, or row-wise for ``(N, in)``."""
    if w.ndim != 2:
        raise ValueError(f"linear weights must be a matrix, got shape {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input length {x.shape[-1]} != weight columns {w.shape[1]}"
                         f" (input {x.shape}, weights {w.shape})")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            accumulate(x, g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, w.shape[0])
            accumulate(w, g2.T @ x.data.reshape(-1, w.shape[1]))
        if b is not None and b.requires_grad:
            accumulate(b, g.reshape(-1, w.shape[0]).sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward, "linear")


def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``(N, C, H, W)`` input with ``(O, C, kh, kw)`` filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d needs rank-4 input and filters, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c or kh > h or kw > wd:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, filters {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({o},)")
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(wd, kw, stride)

    if kh == 1 and kw == 1:
        xs = x.data[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (N, Ho, Wo, C, kh, kw) -> rows of im2col
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        if w.requires_grad:
            accumulate(w, (gm.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            accumulate(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * (ho - 1) + 1:stride,
                       j:j + stride * (wo - 1) + 1:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            accumulate(x, dx)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, wd = x.shape
    ho, wo = h // size, wd // size
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than window {size}")
    blocks = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * size, :wo * size] = gb.reshape(n, c, ho * size, wo * size)
        accumulate(x, dx)

    return record(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def depthwise_xcorr(template: Tensor, search: Tensor) -> Tensor:
    """Per-sample, per-channel sliding dot product of ``template`` over ``search``."""
    if template.ndim != 4 or search.ndim != 4:
        raise ValueError(f"depthwise_xcorr needs rank-4 tensors, got {template.shape}"
                         f" and {search.shape}")
    n, c, hz, wz = template.shape
    ns, cs, hx, wx = search.shape
    if ns != n or cs != c:
        raise ValueError(f"depthwise_xcorr: template {template.shape} and search {search.shape}"
                         " disagree on batch or channels")
    if hz > hx or wz > wx:
        raise ValueError(f"depthwise_xcorr: template {template.shape} larger than"
                         f" search {search.shape}")
    ho, wo = hx - hz + 1, wx - wz + 1
    win = sliding_window_view(search.data, (hz, wz), axis=(2, 3))  # (N, C, Ho, Wo, hz, wz)
    out = np.einsum("nchwij,ncij->nchw", win, template.data, optimize=True)

    def backward(g):
        if template.requires_grad:
            accumulate(template, np.einsum("nchw,nchwij->ncij", g, win, optimize=True))
        if search.requires_grad:
            ds = np.zeros_like(search.data)
            for i in range(hz):
                for j in range(wz):
                    ds[:, :, i:i + ho, j:j + wo] += g * template.data[:, :, i, j][:, :, None, None]
            accumulate(search, ds)

    return record(np.ascontiguousarray(out), (template, search), backward, "depthwise_xcorr")


def gap(x: Tensor) -> Tensor:
    """Global average pool ``(N, C, H, W)`` to ``(N, C)``."""
    n, c, h, wd = x.shape
    if h * wd < 1:
        raise ValueError(f"gap: empty spatial extent in {x.shape}")
    area = h * wd

    def backward(g):
        accumulate(x, np.broadcast_to((g / area)[:, :, None, None], x.shape))

    # Averaging deviations from the first element keeps constant maps exact.
    ref = x.data[:, :, 0, 0]
    out = ref + (x.data - ref[:, :, None, None]).mean(axis=(2, 3))
    return record(out, (x,), backward, "gap")


# --------------------------------------------------------------------------- oracle


def numeric_gradient(f: Callable[[Tensor], object], x: Tensor | np.ndarray,
                     eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit only).

    ``f`` receives a Tensor and may return a Tensor or a float.  Evaluated
    without a tape so it stays independent of the backward pass.
    """
    t = x if isinstance(x, Tensor) else Tensor(x, dtype=np.float64)
    if t.data.dtype != np.float64:
        raise ValueError("numeric_gradient requires 64-bit data")

    def value() -> float:
        with no_grad():
            v = f(t)
        v = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise ValueError("numeric_gradient: function returned a non-finite value")
        return v

    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value()
        flat[i] = orig - eps
        down = value()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad
