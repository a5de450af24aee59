"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a backward closure to a global tape
in execution order. ``Tensor.backward()`` seeds the output gradient and
replays the tape in reverse, which is a valid topological order because the
tape order is the execution order. The tape is cleared after each replay,
so the intended usage is one forward pass, one backward pass, one optimizer
step, repeat.

The default dtype is float32 for training; gradient checks switch the whole
engine to float64 through ``use_dtype``. Operations never re-cast their
operands, so a graph built under one dtype stays in that dtype.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "set_default_dtype",
    "get_default_dtype",
    "use_dtype",
    "no_grad",
    "is_grad_enabled",
    "clear_tape",
    "tape_size",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "sqrt",
    "relu",
    "sigmoid",
    "matmul",
    "einsum",
    "reshape",
    "transpose",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "l2_norm",
    "extract_patches",
    "scatter_patches",
    "conv2d",
    "deconv2d",
    "conv_output_size",
    "deconv_output_size",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_tape: list[Callable[[], None]] = []


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, benchmarks)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def clear_tape() -> None:
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


class Tensor:
    """A numpy array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying buffer (not a copy)."""
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph."""
        return _wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Seed this tensor's gradient with ones and replay the tape in reverse.

        Clears the tape afterwards. Backward closures belonging to graphs
        that never received a gradient see ``grad is None`` and return
        immediately, so unrelated forward work on the same tape is harmless.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        self.grad = np.ones_like(self.data)
        try:
            for fn in reversed(_tape):
                fn()
        finally:
            _tape.clear()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Pass tensors through; wrap scalars/arrays as constants in the default dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    # Internal constructor that never re-casts: op results keep their dtype.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires_grad
    return t


def _needs_grad(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _record(out: Tensor, backward: Callable[[], None]) -> None:
    if out.requires_grad:
        _tape.append(backward)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First contribution may alias the consumer's gradient; closures never
    # mutate gradients in place, so aliasing is safe.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _broadcast_check(a_shape: tuple, b_shape: tuple) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a_shape} and {b_shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    out = _wrap(a.data + b.data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    out = _wrap(a.data - b.data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    out = _wrap(a.data * b.data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    out = _wrap(a.data / b.data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record(out, backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _wrap(-a.data, _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, -g)

    _record(out, backward)
    return out


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = _wrap(a.data**p, _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g * p * a.data ** (p - 1.0))

    _record(out, backward)
    return out


def sqrt(a) -> Tensor:
    """Elementwise square root; callers keep inputs strictly positive."""
    a = as_tensor(a)
    out = _wrap(np.sqrt(a.data), _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g * 0.5 / out.data)

    _record(out, backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.maximum(a.data, 0.0), _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    _record(out, backward)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign to avoid overflow in exp.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _wrap(y, _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g * out.data * (1.0 - out.data))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-dimension broadcasting.

    1-D operands follow the numpy convention: a 1-D first operand is a row
    vector, a 1-D second operand is a column vector, and the singleton
    dimension is dropped from the result.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    a_mat = a.data[None, :] if a.ndim == 1 else a.data
    b_mat = b.data[:, None] if b.ndim == 1 else b.data
    if a_mat.shape[-1] != b_mat.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    if a_mat.ndim > 2 or b_mat.ndim > 2:
        _broadcast_check(a_mat.shape[:-2], b_mat.shape[:-2])
    data = np.matmul(a_mat, b_mat)
    if a.ndim == 1:
        data = data[..., 0, :]
    if b.ndim == 1:
        data = data[..., 0]
    out = _wrap(data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        g_mat = g
        if a.ndim == 1:
            g_mat = np.expand_dims(g_mat, -2)
        if b.ndim == 1:
            g_mat = np.expand_dims(g_mat, -1)
        if a.requires_grad:
            ga = np.matmul(g_mat, b_mat.swapaxes(-1, -2))
            ga = _unbroadcast(ga, a_mat.shape)
            _accum(a, ga[0] if a.ndim == 1 else ga)
        if b.requires_grad:
            gb = np.matmul(a_mat.swapaxes(-1, -2), g_mat)
            gb = _unbroadcast(gb, b_mat.shape)
            _accum(b, gb[:, 0] if b.ndim == 1 else gb)

    _record(out, backward)
    return out


def _parse_einsum(subscripts: str) -> tuple[str, str, str]:
    spec = subscripts.replace(" ", "")
    if "->" not in spec or "," not in spec:
        raise ValueError(f"einsum spec must look like 'ab,bc->ac', got {subscripts!r}")
    lhs, out_sub = spec.split("->")
    terms = lhs.split(",")
    if len(terms) != 2:
        raise ValueError("einsum supports exactly two operands")
    a_sub, b_sub = terms
    for term in (a_sub, b_sub):
        if len(set(term)) != len(term):
            raise ValueError(f"repeated index in operand subscript {term!r}")
        for label in term:
            other = b_sub if term is a_sub else a_sub
            if label not in out_sub and label not in other:
                raise ValueError(f"index {label!r} appears in one operand only and not in the output")
    for label in out_sub:
        if label not in a_sub and label not in b_sub:
            raise ValueError(f"output index {label!r} missing from the operands")
    return a_sub, b_sub, out_sub


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum contraction with automatic backward rules.

    Each operand's gradient is itself an einsum with the output and the
    other operand swapped into place, which is valid for contraction-style
    specs (no diagonals, every index present in at least two of the three
    terms). That restriction is enforced at parse time.
    """
    a, b = as_tensor(a), as_tensor(b)
    a_sub, b_sub, out_sub = _parse_einsum(subscripts)
    if len(a_sub) != a.ndim or len(b_sub) != b.ndim:
        raise ShapeError(
            f"einsum {subscripts!r} expects ranks {len(a_sub)},{len(b_sub)}, got shapes {a.shape} and {b.shape}"
        )
    data = np.einsum(subscripts, a.data, b.data, optimize=True)
    out = _wrap(data, _needs_grad(a, b))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data, optimize=True))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data, optimize=True))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    out = _wrap(data, _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    _record(out, backward)
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    out = _wrap(np.ascontiguousarray(a.data.transpose(axes)), _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    _record(out, backward)
    return out


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _wrap(data, _needs_grad(*parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        if g is None:
            return
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(start), int(stop))
                _accum(p, g[tuple(index)])

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = _wrap(a.data.sum(axis=axes, keepdims=keepdims), _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            ge = g if keepdims else np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(ge, a.shape))

    _record(out, backward)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    out = _wrap(a.data.mean(axis=axes, keepdims=keepdims), _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            ge = g if keepdims else np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(ge / count, a.shape))

    _record(out, backward)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y, _needs_grad(a))

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            y_ = out.data
            dot = (g * y_).sum(axis=axis, keepdims=True)
            _accum(a, (g - dot) * y_)

    _record(out, backward)
    return out


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis with a zero-safe gradient.

    The gradient is x / max(norm, tiny), so an all-zero vector gets a zero
    gradient instead of NaN.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out_data = norm if keepdims else np.squeeze(norm, axis=axis)
    out = _wrap(out_data, _needs_grad(a))
    tiny = np.finfo(a.dtype).tiny

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, ge * a.data / np.maximum(norm, tiny))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution building blocks


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _patch_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if kh > h + 2 * padding or kw > w + 2 * padding or oh < 1 or ow < 1:
        raise ShapeError(f"kernel ({kh}x{kw}, stride {stride}, padding {padding}) does not fit input {h}x{w}")
    return oh, ow


def _im2col(img: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[b, c, h, w] -> [b, oh*ow, c*kh*kw] patch matrix."""
    b, c, h, w = img.shape
    oh, ow = _patch_geometry(h, w, kh, kw, stride, padding)
    if padding:
        img = np.pad(img, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=img.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(b, oh * ow, c * kh * kw)


def _col2im(
    cols: np.ndarray, out_shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the image grid."""
    b, c, h, w = out_shape
    oh, ow = _patch_geometry(h, w, kh, kw, stride, padding)
    img = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            # += because overlapping windows must accumulate.
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if padding:
        img = img[:, :, padding : padding + h, padding : padding + w]
    return img


def extract_patches(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Sliding-window patches of a [b, c, h, w] tensor as [b, positions, c*kh*kw]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"extract_patches needs a [b, c, h, w] tensor, got {x.shape}")
    shape = x.shape
    out = _wrap(_im2col(x.data, kh, kw, stride, padding), _needs_grad(x))

    def backward():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, _col2im(g, shape, kh, kw, stride, padding))

    _record(out, backward)
    return out


def scatter_patches(cols, out_hw: tuple[int, int], channels: int, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of extract_patches: [b, positions, c*kh*kw] -> [b, c, h, w]."""
    cols = as_tensor(cols)
    if cols.ndim != 3:
        raise ShapeError(f"scatter_patches needs a [b, positions, c*kh*kw] tensor, got {cols.shape}")
    h, w = out_hw
    oh, ow = _patch_geometry(h, w, kh, kw, stride, padding)
    b, positions, patch = cols.shape
    if positions != oh * ow or patch != channels * kh * kw:
        raise ShapeError(
            f"patch matrix {cols.shape} does not match geometry "
            f"(expected positions={oh * ow}, patch={channels * kh * kw})"
        )
    shape = (b, channels, h, w)
    out = _wrap(_col2im(cols.data, shape, kh, kw, stride, padding), _needs_grad(cols))

    def backward():
        g = out.grad
        if g is None:
            return
        if cols.requires_grad:
            _accum(cols, _im2col(g, kh, kw, stride, padding))

    _record(out, backward)
    return out


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: [b, c, h, w] * [o, c, kh, kw] -> [b, o, oh, ow]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    oh, ow = _patch_geometry(h, w, kh, kw, stride, padding)
    cols = extract_patches(x, kh, kw, stride, padding)  # [b, p, c*kh*kw]
    flat = reshape(cols, (b * oh * ow, c * kh * kw))
    wmat = transpose(reshape(kernel, (o, c * kh * kw)), (1, 0))  # [c*kh*kw, o]
    out = matmul(flat, wmat)  # [b*p, o]
    out = reshape(out, (b, oh, ow, o))
    return transpose(out, (0, 3, 1, 2))


def deconv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of conv2d in its input.

    Kernel layout is [in_channels, out_channels, kh, kw], so a conv kernel
    [o, c, kh, kw] used here maps o channels back to c channels and
    <conv2d(x, K), y> == <x, deconv2d(y, K)> holds exactly.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"deconv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, ci, hh, ww = x.shape
    ki, ko, kh, kw = kernel.shape
    if ki != ci:
        raise ShapeError(f"deconv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    h = deconv_output_size(hh, kh, stride, padding)
    w = deconv_output_size(ww, kw, stride, padding)
    if h < 1 or w < 1:
        raise ShapeError(f"deconv2d geometry is empty: input {hh}x{ww}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    flat = reshape(transpose(x, (0, 2, 3, 1)), (b * hh * ww, ci))  # [b*p, ci]
    kmat = reshape(kernel, (ci, ko * kh * kw))
    cols = matmul(flat, kmat)  # [b*p, ko*kh*kw]
    cols = reshape(cols, (b, hh * ww, ko * kh * kw))
    return scatter_patches(cols, (h, w), ko, kh, kw, stride, padding)
