"""Small dense tensor engine with reverse-mode differentiation.

Every tensor wraps a contiguous numpy buffer. Operations on tensors that
require gradients record a node (parents plus an adjoint closure); calling
:meth:`Tensor.backward` replays those adjoints in exact reverse execution
order.

Broadcasting is deliberately narrow: elementwise binary ops need equal
shapes, and :func:`bias_add` broadcasts a trailing-shaped bias over the
leading dimensions. Nothing else broadcasts.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "precision",
    "no_grad",
    "default_dtype",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "bias_add",
    "sigmoid",
    "swish",
    "gelu",
    "tanh",
    "elementwise",
    "softmax",
    "layernorm",
    "cross_entropy",
    "apply_mask",
    "embedding",
    "dropout",
    "reshape",
    "transpose",
    "getitem",
    "sum",
    "mean",
    "backward",
    "grad_check",
]

PRECISIONS = {"oracle64": np.float64, "run32": np.float32}

_dtype = np.float64
_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents are incompatible for the requested op."""


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype used for new tensors (``oracle64`` or ``run32``)."""
    global _dtype
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    previous = _dtype
    _dtype = PRECISIONS[mode]
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, analysis)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_adjoint", "_op", "_seq", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._consumed = False

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._seq = next(_seq)
    out._consumed = False
    out._op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._adjoint = adjoint
    else:
        out._parents = ()
        out._adjoint = None
    return out


# ---------------------------------------------------------------------------
# graph and backward


class Graph:
    """Ops reachable from an output, in the order they were executed."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._consumed:
            raise RuntimeError("backward was already run through this graph; rebuild the forward pass")
        if not loss.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._adjoint(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in self.nodes:
            if not node.is_leaf:
                node._adjoint = None
                node._consumed = True


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Fill ``.grad`` of every tensor the scalar ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    (graph or Graph.trace(loss)).backward(loss)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), adjoint, "matmul")


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` whose shape equals the trailing extents of ``x``."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    k = bias.ndim
    if k > x.ndim or x.shape[x.ndim - k:] != bias.shape:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match trailing extents of {x.shape}")
    lead = tuple(range(x.ndim - k))

    def adjoint(g):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + bias.data, (x, bias), adjoint, "bias_add")


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much cheaper than exp-based expit
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _logistic(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _logistic(xd)
    return _result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "swish")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU in the tanh form used by the reference BERT code."""
    xd = x.data
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * xd * xd))

    def adjoint(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(0.5 * xd * (1.0 + t), (x,), adjoint, "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "bias_add": bias_add,
    "sigmoid": sigmoid,
    "swish": swish,
    "gelu": gelu,
    "tanh": tanh,
}


def elementwise(op_kind: str, *inputs: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (bool, broadcastable to ``x``) marks the entries that may receive
    probability; the rest get exactly zero. A row with no admissible entry
    raises ``ValueError``.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: a row has every position masked (degenerate sequence)")
        z = np.where(mask, xd, -np.inf)
        finite = np.isfinite(xd) | ~mask
    else:
        z = xd
        finite = np.isfinite(xd)
    if not finite.all():
        raise FloatingPointError("softmax: non-finite input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), adjoint, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} vs feature extent {d}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def adjoint(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), adjoint, "layernorm")


def cross_entropy(logits: Tensor, targets: np.ndarray, denominator: float | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` divided by ``denominator``.

    ``logits`` is ``[N, V]``; the denominator defaults to ``N`` (plain mean).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows of logits but {targets.shape[0]} targets")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("cross_entropy: target id outside vocabulary")
    denom = float(n if denominator is None else denominator)
    ld = logits.data
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, targets].sum() / denom

    def adjoint(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / denom),)

    return _result(np.asarray(loss, dtype=ld.dtype), (logits,), adjoint, "cross_entropy")


# ---------------------------------------------------------------------------
# indexing and shape


def apply_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero ``x`` wherever ``keep`` is false; ``keep`` covers the leading extents of ``x``."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[: keep.ndim]:
        raise ShapeError(f"apply_mask: mask {keep.shape} does not cover leading extents of {x.shape}")
    keep = keep.reshape(keep.shape + (1,) * (x.ndim - keep.ndim))
    zero = np.zeros((), dtype=x.dtype)
    return _result(np.where(keep, x.data, zero), (x,), lambda g: (np.where(keep, g, zero),), "apply_mask")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def adjoint(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding: id outside table of {rows} rows")
    return _result(table.data[ids], (table,), adjoint, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``rate == 0`` returns ``x`` untouched."""
    if rate == 0.0:
        return x
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout with a positive rate needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), adjoint, "getitem")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values each
    time it is called. The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
