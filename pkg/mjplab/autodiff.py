"""Reverse-mode automatic differentiation over dense numpy tensors.

Recording is define-by-run: operations are appended to the innermost active
:class:`Graph` whenever one of their inputs requires a gradient.  Outside a
graph the same code simply computes values, which is how evaluation paths
avoid the bookkeeping.

Example::

    >>> w = parameter(np.array([3.0]), name='w')
    >>> with Graph() as graph:
    ...     loss = sum(w * w)
    >>> backward(graph, loss, [w])[0].tolist()
    [6.0]

"""

import dataclasses
import logging
import threading

from typing import (
    Any,
    Callable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import scipy.special  # type: ignore

from mjplab.errors import (
    DomainError,
    NonScalarLoss,
    ShapeMismatch,
)

_LOGGER = logging.getLogger(__name__)

_LOCAL = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _graph_stack() -> List['Graph']:
    try:
        return _LOCAL.stack
    except AttributeError:
        _LOCAL.stack = []
        return _LOCAL.stack


class Graph:
    """Append-only record of the operations of one forward pass.

    Insertion order is a topological order, so :func:`backward` just walks
    the record in reverse.
    """

    def __init__(self) -> None:
        self.nodes: List['Tensor'] = []

    def __enter__(self) -> 'Graph':
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _graph_stack().pop()
        assert popped is self, 'graphs must be exited in LIFO order'

    def __len__(self):
        return len(self.nodes)

    def record(self, tensor: 'Tensor') -> None:
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)

    def clear(self) -> None:
        self.nodes = []


def current_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally linked into the active graph."""

    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.parents: Tuple['Tensor', ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.node_id: Optional[int] = None

    def __repr__(self):
        label = ' name=%r' % self.name if self.name else ''
        return 'Tensor(shape=%r%s)' % (self.shape, label)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> 'Tensor':
        return swapaxes(self, -1, -2)


TensorLike = Union[Tensor, np.ndarray, float, int]


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data: Any) -> Tensor:
    return Tensor(data)


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: TensorLike) -> Tensor:
    return Tensor(as_tensor(x).data)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        graph.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: Callable, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return op(a, b)
    except ValueError as err:
        raise ShapeMismatch('%s: %r vs %r' % (err, a.shape, b.shape))


#
# Elementwise binary operations.
#
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(_broadcast(np.add, a.data, b.data), (a, b), backward_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(_broadcast(np.subtract, a.data, b.data), (a, b), backward_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(_broadcast(np.multiply, a.data, b.data), (a, b), backward_fn)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError('division by zero')

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return _make(_broadcast(np.divide, a.data, b.data), (a, b), backward_fn)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(
            'matmul needs at least 2-d operands, got %r and %r' % (a.shape, b.shape))
    out = _broadcast(np.matmul, a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), backward_fn)


#
# Elementwise unary operations.
#
def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x, ), lambda g: (g * out, ))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError('log of non-positive value %r' % x.data.min())
    return _make(np.log(x.data), (x, ), lambda g: (g / x.data, ))


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError('sqrt of non-positive value %r' % x.data.min())
    out = np.sqrt(x.data)
    return _make(out, (x, ), lambda g: (0.5 * g / out, ))


def abs(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x, ), lambda g: (g * np.sign(x.data), ))


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x, ), lambda g: (2.0 * g * x.data, ))


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x, ), lambda g: (g * (1.0 - out * out), ))


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = scipy.special.expit(x.data)
    return _make(out, (x, ), lambda g: (g * out * (1.0 - out), ))


def softplus(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x, ), lambda g: (g * scipy.special.expit(x.data), ))


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    return _make(np.where(positive, x.data, 0.0), (x, ), lambda g: (g * positive, ))


def clamp_min(x: TensorLike, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.data > floor
    return _make(np.where(keep, x.data, floor), (x, ), lambda g: (g * keep, ))


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = scipy.special.softmax(x.data, axis=axis)

    def backward_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot), )
    return _make(out, (x, ), backward_fn)


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = scipy.special.log_softmax(x.data, axis=axis)

    def backward_fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True), )
    return _make(out, (x, ), backward_fn)


#
# Reductions and shape manipulation.
#
def sum(x: TensorLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(), )
    return _make(np.asarray(out), (x, ), backward_fn)


def mean(x: TensorLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis, )
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x, ), lambda g: (g.reshape(x.shape), ))


def swapaxes(x: TensorLike, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x, ), lambda g: (np.swapaxes(g, a, b), ))


def expand_dims(x: TensorLike, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def slice_(x: TensorLike, index: Any) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full, )
    return _make(np.array(x.data[index]), (x, ), backward_fn)


def take(x: TensorLike, indices: Any, axis: int = -1) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate gradients."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full, )
    return _make(out, (x, ), backward_fn)


def gather(x: TensorLike, rows: Any) -> Tensor:
    """Rows of ``x`` (axis 0)."""
    return take(x, rows, axis=0)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(out, parts, backward_fn)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))
    return _make(out, parts, backward_fn)


def where(condition: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)

    def backward_fn(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))
    return _make(np.where(cond, a.data, b.data), (a, b), backward_fn)


#
# Composite layers.
#
def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(square(centered), axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def dropout(x: TensorLike, rate: float, rng: Any = None, train: bool = False) -> Tensor:
    """Inverted dropout; the identity when ``train`` is off or ``rate`` is 0."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    assert rng is not None, 'dropout in training mode needs an rng'
    keep = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    return x * keep


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient routed to ``soft`` unchanged."""
    soft = as_tensor(soft)
    return _make(np.asarray(hard, dtype=np.float64), (soft, ), lambda g: (g, ))


#
# Gradients.
#
def backward(graph: Graph, loss: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves the loss does not depend on get zero gradients.

    :raises NonScalarLoss: if ``loss`` has more than one element.
    """
    if loss.data.size != 1:
        raise NonScalarLoss('loss must be a scalar, got shape %r' % (loss.shape, ))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        assert node.backward_fn is not None
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    return [np.array(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
            for leaf in leaves]


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int = 200,
    rng: Any = None,
    floor: float = 1e-3,
) -> float:
    """Worst relative error between backprop and central differences.

    Checks at most ``max_coords`` coordinates, sampled with ``rng`` when the
    parameters have more.  The error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    with Graph() as graph:
        loss = fn()
    analytic = backward(graph, loss, params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(coords) > max_coords:
        if rng is None:
            from mjplab.numerics import Rng
            rng = Rng(0)
        chosen = rng.permutation(len(coords))[:max_coords]
        coords = [coords[c] for c in sorted(chosen)]

    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.data.reshape(-1)
        saved = flat[j]
        flat[j] = saved + eps
        plus = fn().item()
        flat[j] = saved - eps
        minus = fn().item()
        flat[j] = saved

        numeric = (plus - minus) / (2.0 * eps)
        exact = analytic[i].reshape(-1)[j]
        err = np.abs(exact - numeric) / max(np.abs(exact), np.abs(numeric), floor)
        worst = max(worst, float(err))
    return worst


@dataclasses.dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = dataclasses.field(default_factory=list)
    v: List[np.ndarray] = dataclasses.field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[Tensor], lr: float) -> 'AdamState':
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update; replaces each ``param.data``."""
    assert len(params) == len(grads) == len(state.m), 'params/grads/state mismatch'
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeMismatch('gradient shape %r != parameter shape %r' % (g.shape, p.shape))
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = p.data - update


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def clip_global_norm(
    grads: Sequence[np.ndarray],
    max_norm: float = 1.0,
) -> Tuple[List[np.ndarray], float]:
    """Rescale all gradients by ``max_norm / norm`` when the global norm exceeds it."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm
