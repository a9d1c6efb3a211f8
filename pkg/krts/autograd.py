"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations only build a graph while a ``Tape`` is active::

    with Tape() as tape:
        loss = (x @ w).sum()
    backward(tape, loss)

Outside a tape every operation is a plain forward computation.
"""
from contextvars import ContextVar
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

MASK_VALUE = -1e8

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    pass


class Tape:
    def __init__(self):
        self.nodes: List["Tensor"] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _active_tape.reset(self._token)

    def record(self, node: "Tensor"):
        self.nodes.append(node)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _const(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._const(other))

    def __radd__(self, other):
        return add(self._const(other), self)

    def __sub__(self, other):
        return sub(self, self._const(other))

    def __rsub__(self, other):
        return sub(self._const(other), self)

    def __mul__(self, other):
        return mul(self, self._const(other))

    def __rmul__(self, other):
        return mul(self._const(other), self)

    def __truediv__(self, other):
        return div(self, self._const(other))

    def __neg__(self):
        return mul(self, self._const(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


class Parameter(Tensor):
    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


TensorLike = Union[Tensor, np.ndarray, float]


def as_tensor(x: TensorLike, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape.get()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.dtype)
    if grad.shape != tensor.shape:
        grad = _unbroadcast(grad, tensor.shape)
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Parameter]] = None):
    """Populates ``.grad`` of everything ``loss`` depends on through ``tape``.

    ``params`` are zeroed first so that unreached parameters end up with zero
    gradients rather than stale ones.
    """
    if loss.data.size != 1:
        raise ShapeError(f"Loss must be a scalar, got shape {loss.shape}")
    if params is not None:
        for param in params:
            param.zero_grad()
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _make(a.data + b.data, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _make(a.data - b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _make(a.data * b.data, (a, b), _backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))
    return _make(a.data / b.data, (a, b), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Cannot multiply shapes {a.shape} and {b.shape}")

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                flat_a = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, flat_a.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), _backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _backward(g):
        _accumulate(x, g * positive)
    return _make(np.where(positive, x.data, 0).astype(x.dtype), (x,), _backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _backward(g):
        _accumulate(x, g * out)
    return _make(out, (x,), _backward)


def log(x: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(x, g / x.data)
    return _make(np.log(x.data), (x,), _backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def _backward(g):
        _accumulate(x, g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), _backward)


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        _accumulate(x, g.transpose(inverse))
    return _make(x.data.transpose(axes), (x,), _backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] += g
        else:
            # repeated indices must accumulate
            np.add.at(grad, index, g)
        _accumulate(x, grad)
    return _make(x.data[index], (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(t, g[tuple(index)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)

    def _backward(g):
        _accumulate(x, g * mask)
    return _make(np.where(mask, x.data, np.asarray(fill, dtype=x.dtype)), (x,), _backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def _backward(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)
    return _make(np.where(take_a, a.data, b.data), (a, b), _backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data >= b.data

    def _backward(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)
    return _make(np.where(take_a, a.data, b.data), (a, b), _backward)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)

    def _backward(g):
        _accumulate(x, g * inside)
    return _make(np.clip(x.data, low, high), (x,), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def _backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _make(out, (x,), _backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _backward(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))
    return _make(out, (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"Layer norm parameters {gain.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std
    n = x.shape[-1]

    def _backward(g):
        if x.requires_grad:
            d_hat = g * gain.data
            _accumulate(x, inv_std / n * (
                n * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            ))
        _accumulate(gain, (g * x_hat).reshape(-1, n).sum(axis=0))
        _accumulate(bias, g.reshape(-1, n).sum(axis=0))
    return _make(x_hat * gain.data + bias.data, (x, gain, bias), _backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("Dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"Linear input width {x.shape[-1]} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def mask_fill(logits: Tensor, mask: np.ndarray) -> Tensor:
    return where(mask, logits, MASK_VALUE)
