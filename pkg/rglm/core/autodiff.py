"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and records a closure that pushes the
output gradient back to its parents (define-by-run). ``backward`` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from rglm.errors import DimensionError, NumericError, ParameterError, ParseError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A differentiable dense array."""

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + grad

    # ------------------------------------------------------------------
    # Operator sugar
    # ------------------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is its dotted path inside a model."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, _parents=tuple(parents) if tracked else (), _op=op)
    if tracked:
        out._backward = backward
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), "div", backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), f"pow{exponent}", backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), "square", backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), "sqrt", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), "exp", backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", backward)


# ----------------------------------------------------------------------
# Nonlinearities
# ----------------------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def backward(g):
        a._accumulate(g * on)

    return _make(np.where(on, a.data, 0.0), (a,), "relu", backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), "tanh", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out_data, (a,), "gelu", backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", backward)


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(a))``."""
    a = as_tensor(a)
    x = a.data
    out_data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        # d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
        s_neg = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))), 1.0 / (1.0 + np.exp(-np.abs(x))))
        a._accumulate(g * s_neg)

    return _make(out_data, (a,), "log_sigmoid", backward)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    total = np.sum(e, axis=axis, keepdims=True)
    out_data = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), "softmax", backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    peak = np.max(x, axis=axis, keepdims=True)
    shifted = x - peak
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        probs = np.exp(out_data)
        a._accumulate(g - probs * np.sum(g, axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", backward)


def layer_norm(a, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - out_data * gy))

    return _make(out_data, (a,), "layer_norm", backward)


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out_data > 0, out_data, 1.0)
        a._accumulate(g * a.data / safe)

    shown = out_data if keepdims else np.squeeze(out_data, axis=axis)
    return _make(shown, (a,), "l2_norm", backward)


# ----------------------------------------------------------------------
# Linear algebra and shape manipulation
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), "matmul", backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), "transpose", backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), "reshape", backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return _make(out_data, tuple(tensors), "concat", backward)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing (the slice op)."""
    a = as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(np.array(out_data, copy=True), (a,), "slice", backward)


def gather_rows(a, rows) -> Tensor:
    """Select rows along axis 0 (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for shape {a.shape}")
    return getitem(a, rows)


def embedding(weight, ids) -> Tensor:
    return gather_rows(weight, np.asarray(ids, dtype=np.int64))


def index_mean_pool(a, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row ``k`` of the output is the mean of ``a``'s rows listed in ``groups[k]``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"index_mean_pool: expected a matrix, got shape {a.shape}")
    pool = np.zeros((len(groups), a.shape[0]), dtype=DTYPE)
    for k, idx in enumerate(groups):
        idx = np.asarray(list(idx), dtype=np.int64)
        if idx.size == 0:
            raise UsageError(f"index_mean_pool: group {k} is empty")
        if idx.min() < 0 or idx.max() >= a.shape[0]:
            raise DimensionError(f"index_mean_pool: group {k} indexes outside shape {a.shape}")
        np.add.at(pool[k], idx, 1.0 / idx.size)
    out_data = np.zeros((len(groups), a.shape[1]), dtype=DTYPE)
    for k, idx in enumerate(groups):
        out_data[k] = a.data[list(idx)].mean(axis=0)

    def backward(g):
        a._accumulate(pool.T @ g)

    return _make(out_data, (a,), "index_mean_pool", backward)


# ----------------------------------------------------------------------
# Backpropagation
# ----------------------------------------------------------------------
def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients of every tensor in the graph are recomputed from zero, so
    repeated calls on the same graph give identical results. Parameters
    listed in ``parameters`` that do not participate receive zeros. Returns
    the gradient store ``{name: grad}`` for ``parameters``.
    """
    if loss.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    store: dict[str, np.ndarray] = {}
    if parameters is not None:
        in_graph = {id(node) for node in order}
        for p in parameters:
            if id(p) not in in_graph or p.grad is None or not p.requires_grad:
                p.grad = np.zeros_like(p.data)
            store[getattr(p, "name", "") or str(id(p))] = p.grad
    return store


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values and
    must be deterministic. For each parameter the error is
    ``||analytic - fd|| / max(||fd||, 1e-8)`` over the checked coordinates;
    the maximum over parameters is returned. ``max_entries`` limits the
    checked coordinates per parameter to a seeded random subset.
    """
    if not 0 < eps <= 1e-2:
        raise ParameterError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: loss is not finite")
    backward(loss, params)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(coords.size, dtype=DTYPE)
        for i, c in enumerate(coords):
            saved = flat[c]
            flat[c] = saved + eps
            up = f().item()
            flat[c] = saved - eps
            down = f().item()
            flat[c] = saved
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {getattr(p, 'name', '')}[{c}]")
            numeric[i] = (up - down) / (2 * eps)
        diff = np.linalg.norm(grad.reshape(-1)[coords] - numeric)
        rel = diff / max(np.linalg.norm(numeric), 1e-8)
        logger.debug("grad_check: %s rel_err=%.3e", getattr(p, "name", "?"), rel)
        worst = max(worst, float(rel))
    return worst


# ----------------------------------------------------------------------
# Modules and checkpoints
# ----------------------------------------------------------------------
class Module:
    """Container of named parameters and sub-modules.

    Parameters are discovered from instance attributes in definition
    order; lists/tuples of modules are traversed with their index.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item.name, item

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.requires_grad or not trainable_only]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ParseError("checkpoint is missing parameters", record=sorted(missing)[0])
        for name, p in own.items():
            values = np.asarray(state[name], dtype=DTYPE)
            if values.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {values.shape} != model shape {p.shape}")
            p.data = values.copy()


def save_parameters(module: Module, path: str | Path, meta: dict | None = None) -> None:
    """Write ``{"meta": ..., "parameters": {name: {"shape", "values"}}}`` as JSON."""
    payload = {
        "meta": meta or {},
        "parameters": {
            name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in module.named_parameters()
        },
    }
    Path(path).write_text(json.dumps(payload))
    logger.debug("Checkpoint: saved %d parameters to %s", len(payload["parameters"]), path)


def read_parameters(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        payload = json.loads(Path(path).read_text())
        raw = payload["parameters"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    state = {}
    for name, entry in raw.items():
        try:
            state[name] = np.asarray(entry["values"], dtype=DTYPE).reshape(entry["shape"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"malformed parameter entry: {exc}", record=name) from exc
    return state, payload.get("meta", {})


def load_parameters(module: Module, path: str | Path) -> dict:
    state, meta = read_parameters(path)
    module.load_state_dict(state)
    return meta
