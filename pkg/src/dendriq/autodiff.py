"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: every operation computes its result eagerly and records a
backward closure plus parent links on the output tensor. Calling
``backward()`` on a scalar output replays the closures in reverse
topological order, accumulating gradients into every tensor that requires
them. There is no graph object to manage; the tape is the chain of
``Tensor`` nodes created by running ordinary Python code.

Gradient recording can be suspended with the :func:`no_grad` context
manager (used for action selection and target-network evaluation, where
only values are needed). Custom operations -- e.g. the spike nonlinearity
with its surrogate derivative -- plug in through :func:`from_op`.

Default element type is float64 so tests can compare against exact
oracles; :func:`set_default_dtype` switches the library to float32.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the element type used for newly created tensors.

    Accepts ``numpy.float64``/``numpy.float32`` or the strings
    ``"float64"``/``"float32"``.
    """
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = resolved.type


def default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Context manager that disables gradient recording within its block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense n-dimensional array with an optional gradient slot.

    ``data`` is always a numpy array in row-major order. Leaf tensors
    created with ``requires_grad=True`` are trainable parameters; tensors
    produced by operations carry the parent links and backward closure
    needed to propagate gradients to those leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None

    # ------------------------------------------------------------------
    # bookkeeping

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A new leaf tensor sharing this tensor's data, cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = None
        return out

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{tag})"

    # ------------------------------------------------------------------
    # backward pass

    def backward(self) -> None:
        """Propagate gradients from this scalar output to all leaves.

        Seeds d(output)/d(output) = 1 and walks the recorded tape in
        reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        if self._backward is None and not self._parents:
            raise RuntimeError(
                "backward() called on a tensor with no recorded computation; "
                "run a forward pass with gradients enabled first"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # operators

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use power(x, -1)")
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    # ------------------------------------------------------------------
    # method forms of common ops

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=dtype)
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._backward = None
    out._op = None
    return out


def _in_graph(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None or bool(t._parents)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not _in_graph(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None] | None,
    op: str,
) -> Tensor:
    """Wrap an operation result, recording the tape node if gradients are on.

    ``backward`` receives the output gradient and must call
    :func:`accumulate_grad` on the parents it differentiates. This is the
    extension point for operations defined outside this module (the spike
    nonlinearity uses it).
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._op = op
    if _GRAD_ENABLED and any(_in_graph(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# Public alias used by custom ops in other modules.
accumulate_grad = _accumulate


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} + {b.shape}") from exc

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return from_op(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return from_op(data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(grad):
        _accumulate(a, -grad)

    return from_op(-a.data, (a,), backward, "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    data = a.data ** exponent

    def backward(grad):
        _accumulate(a, grad * exponent * a.data ** (exponent - 1.0))

    return from_op(data, (a,), backward, f"power({exponent})")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(
            f"matmul: only 1-D/2-D operands are supported, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(grad):
        if a.ndim == 2 and b.ndim == 2:
            _accumulate(a, grad @ b.data.T)
            _accumulate(b, a.data.T @ grad)
        elif a.ndim == 2 and b.ndim == 1:
            _accumulate(a, np.outer(grad, b.data))
            _accumulate(b, a.data.T @ grad)
        elif a.ndim == 1 and b.ndim == 2:
            _accumulate(a, b.data @ grad)
            _accumulate(b, np.outer(a.data, grad))
        else:
            _accumulate(a, grad * b.data)
            _accumulate(b, grad * a.data)

    return from_op(data, (a, b), backward, "matmul")


# ----------------------------------------------------------------------
# reductions and shape ops


def _expand_reduced(grad: np.ndarray, axis, keepdims: bool, shape: tuple[int, ...]):
    if axis is None:
        return np.broadcast_to(grad, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        _accumulate(a, _expand_reduced(grad, axis, keepdims, a.shape).copy())

    return from_op(data, (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def backward(grad):
        expanded = _expand_reduced(grad, axis, keepdims, a.shape)
        _accumulate(a, expanded / count)

    return from_op(data, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward(grad):
        _accumulate(a, grad.reshape(a.shape))

    return from_op(data, (a,), backward, "reshape")


# ----------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(grad):
        _accumulate(a, grad * mask)

    return from_op(a.data * mask, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Branch on sign for numerical stability at large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(grad):
        _accumulate(a, grad * out * (1.0 - out))

    return from_op(out, (a,), backward, "sigmoid")


# ----------------------------------------------------------------------
# indexing


def take_along_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position.

    ``index`` has shape ``a.shape[:-1]`` and integer dtype; the result
    drops the last axis. Gradients scatter back to the picked positions.
    """
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ValueError(
            f"take_along_last: index shape {index.shape} does not match "
            f"leading dims of {a.shape}"
        )
    if not np.issubdtype(index.dtype, np.integer):
        raise ValueError("take_along_last: index must be an integer array")
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], grad[..., None], axis=-1)
        _accumulate(a, full)

    return from_op(picked, (a,), backward, "take_along_last")


# ----------------------------------------------------------------------
# convolution


def conv_output_size(extent: int, kernel: int, stride: int) -> int:
    """Spatial output size of an unpadded convolution."""
    if kernel > extent:
        raise ValueError(f"conv2d: kernel {kernel} larger than input extent {extent}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    return (extent - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """2-D cross-correlation, no padding, square stride.

    ``x`` is (N, C, H, W); ``weight`` is (F, C, KH, KW); ``bias`` is (F,).
    Output is (N, F, OH, OW) with OH = (H - KH)//stride + 1.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be (N, C, H, W), got {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (F, C, KH, KW), got {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(
            f"conv2d: input has {c} channels but weight expects {cw}"
        )
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, OH, OW, KH, KW)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(grad):
        gmat = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        _accumulate(weight, (gmat.T @ cols).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, gmat.sum(axis=0))
        if _in_graph(x):
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _accumulate(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return from_op(np.ascontiguousarray(out), parents, backward, "conv2d")
