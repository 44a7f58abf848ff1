"""Dense float64 tensors and a reverse-mode tape.

Every value produced through a :class:`Tape` is a :class:`Tensor` wrapping a
``float64`` numpy array. Operations whose inputs depend on a registered
parameter are recorded; :meth:`Tape.backward` replays them in reverse
recording order and accumulates gradients into per-parameter buffers.

Typical use::

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    x = tape.const(np.random.rand(5, 3))
    loss = ad.mean(ad.square(x @ w))
    grads = tape.backward(loss)
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError", "NonFiniteError", "Tensor", "Tape",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "sum", "mean", "exp", "log",
    "sin", "cos", "relu", "softplus", "sigmoid", "clamp", "concat", "gather",
    "scatter_rows", "abs", "square", "sqrt", "cumsum", "reshape", "take",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("value", "tape", "node", "__weakref__")

    def __init__(self, value: np.ndarray, tape: "Tape", node: int | None = None):
        self.value = value
        self.tape = tape
        self.node = node  # None -> constant w.r.t. every parameter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            _not_scalar(self)
        return float(self.value.reshape(-1)[0])

    def __len__(self) -> int:
        return self.value.shape[0]

    def __repr__(self) -> str:
        kind = "param-dependent" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return take(self, key)


def _not_scalar(t: Tensor):
    raise ShapeError(f"tensor of shape {t.shape} is not a scalar")


class Tape:
    """Records primitive ops on tensors that depend on registered parameters.

    Parameters are leaves created by :meth:`param`. Constants (:meth:`const`)
    never get a node, so purely constant subexpressions cost nothing at
    backward time. With ``record=False`` parameters are registered as
    constants and nothing is recorded, which is how evaluation renders run.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._backward_fns: list[Callable | None] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self.params: dict[str, Tensor] = {}
        self._param_nodes: dict[int, str] = {}
        self.grads: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self._backward_fns)

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        value = _as_f64(value)
        _check_finite(value, f"param {name}")
        if not self.record:
            t = Tensor(value, self)
        else:
            node = self._push(None, (), value.shape)
            self._param_nodes[node] = name
            t = Tensor(value, self, node)
        self.params[name] = t
        return t

    def const(self, value) -> Tensor:
        value = _as_f64(value)
        _check_finite(value, "constant")
        return Tensor(value, self)

    def _push(self, fn, parents, shape) -> int:
        self._backward_fns.append(fn)
        self._parents.append(parents)
        self._shapes.append(shape)
        return len(self._backward_fns) - 1

    def _emit(self, value: np.ndarray, inputs: Sequence[Tensor], fn, name: str) -> Tensor:
        _check_finite(value, name)
        parents = tuple(t.node for t in inputs)
        if not self.record or all(p is None for p in parents):
            return Tensor(value, self)
        return Tensor(value, self, self._push(fn, parents, value.shape))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a one-element ``loss`` w.r.t. every registered parameter."""
        if self.grads is not None:
            raise RuntimeError("backward already ran on this tape; build a new tape")
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            _not_scalar(loss)
        grads: dict[str, np.ndarray] = {
            name: np.zeros_like(t.value) for name, t in self.params.items()
        }
        if loss.node is not None:
            adj: list[np.ndarray | None] = [None] * len(self._backward_fns)
            adj[loss.node] = np.ones(self._shapes[loss.node])
            for node in range(loss.node, -1, -1):
                g = adj[node]
                if g is None:
                    continue
                adj[node] = None
                fn = self._backward_fns[node]
                if fn is None:
                    name = self._param_nodes.get(node)
                    if name is not None:
                        grads[name] += g
                    continue
                for parent, pg in zip(self._parents[node], fn(g)):
                    if parent is None or pg is None:
                        continue
                    if adj[parent] is None:
                        adj[parent] = pg
                    else:
                        adj[parent] = adj[parent] + pg
        self.grads = grads
        # drop the graph so closures holding intermediate arrays can be freed
        self._backward_fns.clear()
        self._parents.clear()
        self._shapes.clear()
        return grads


def _as_f64(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True) if not (
        isinstance(value, np.ndarray) and value.dtype == np.float64
    ) else value


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


def _lift(a, tape: Tape) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return tape.const(a)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- binary ---------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return tape._emit(a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return tape._emit(a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if a.node is not None else None,
                _unbroadcast(g * av, bv.shape) if b.node is not None else None)

    return tape._emit(av * bv, (a, b), back, "mul")


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "div")
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def back(g):
        return (_unbroadcast(g / bv, av.shape) if a.node is not None else None,
                _unbroadcast(-g * out / bv, bv.shape) if b.node is not None else None)

    return tape._emit(out, (a, b), back, "div")


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.value, b.value

    def back(g):
        ga = gb = None
        if a.node is not None:
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        if b.node is not None:
            gb = av.T @ g
        return ga, gb

    return tape._emit(av @ bv, (a, b), back, "matmul")


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` for x (P, n), W (n, m), b (m,) as one tape node."""
    tape = _tape_of(x, W, b)
    x, W, b = _lift(x, tape), _lift(W, tape), _lift(b, tape)
    if (x.value.ndim != 2 or W.value.ndim != 2 or b.value.ndim != 1
            or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]):
        raise ShapeError(f"linear: shapes {x.shape}, {W.shape}, {b.shape} are incompatible")
    xv, Wv = x.value, W.value
    out = xv @ Wv
    out += b.value

    def back(g):
        return (g @ Wv.T if x.node is not None else None,
                xv.T @ g if W.node is not None else None,
                g.sum(axis=0) if b.node is not None else None)

    return tape._emit(out, (x, W, b), back, "linear")


# -- unary ----------------------------------------------------------------


def _unary(a: Tensor, out: np.ndarray, dfn, name: str) -> Tensor:
    return a.tape._emit(out, (a,), lambda g: (g * dfn(),), name)


def neg(a: Tensor) -> Tensor:
    return a.tape._emit(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _unary(a, out, lambda: out, "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _unary(a, out, lambda: 1.0 / av, "log")


def sin(a: Tensor) -> Tensor:
    av = a.value
    return _unary(a, np.sin(av), lambda: np.cos(av), "sin")


def cos(a: Tensor) -> Tensor:
    av = a.value
    return _unary(a, np.cos(av), lambda: -np.sin(av), "cos")


def relu(a: Tensor) -> Tensor:
    av = a.value
    return _unary(a, np.maximum(av, 0.0), lambda: (av > 0.0).astype(np.float64), "relu")


def softplus(a: Tensor) -> Tensor:
    av = a.value
    out = np.logaddexp(0.0, av)
    return _unary(a, out, lambda: _sigmoid(av), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _unary(a, out, lambda: out * (1.0 - out), "sigmoid")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    av = a.value
    out = np.clip(av, lo, hi)

    def d():
        m = np.ones_like(av)
        if lo is not None:
            m[av <= lo] = 0.0
        if hi is not None:
            m[av >= hi] = 0.0
        return m

    return _unary(a, out, d, "clamp")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    av = a.value
    return _unary(a, np.abs(av), lambda: np.sign(av), "abs")


def square(a: Tensor) -> Tensor:
    av = a.value
    return _unary(a, av * av, lambda: 2.0 * av, "square")


def sqrt(a: Tensor) -> Tensor:
    av = a.value
    with np.errstate(invalid="ignore"):
        out = np.sqrt(av)

    def d():
        with np.errstate(divide="ignore"):
            return 0.5 / out

    return _unary(a, out, d, "sqrt")


# -- reductions and structure --------------------------------------------


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._emit(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return a.tape._emit(np.cumsum(a.value, axis=axis), (a,), back, "cumsum")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return a.tape._emit(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back with ``np.add.at``."""
    shape = a.shape
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in parts)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return a.tape._emit(np.asarray(a.value[key]), (a,), back, "take")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    ax = axis % parts[0].value.ndim
    for p in parts[1:]:
        if p.value.ndim != parts[0].value.ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.value.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return tape._emit(np.concatenate([p.value for p in parts], axis=ax), parts,
                      lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``table[index]`` of a 2-D table; gradients scatter-add back to rows."""
    if table.value.ndim != 2:
        raise ShapeError(f"gather expects a 2-D table, got {table.shape}")
    index = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")

    def back(g):
        out = np.zeros((n, g.shape[-1]))
        np.add.at(out, index, g)
        return (out,)

    return table.tape._emit(table.value[index], (table,), back, "gather")


def scatter_rows(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Place rows of ``src`` at distinct positions ``index`` of an n-row zero array."""
    index = np.asarray(index, dtype=np.intp)
    if src.shape[0] != index.shape[0]:
        raise ShapeError(f"scatter_rows: {src.shape[0]} rows vs {index.shape[0]} indices")
    out = np.zeros((n,) + src.shape[1:])
    out[index] = src.value
    return src.tape._emit(out, (src,), lambda g: (g[index],), "scatter_rows")


# -- checking -------------------------------------------------------------


def grad_check(fn: Callable[[Tape, dict[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape, tensors)`` must build a one-element loss from the registered
    parameter tensors. The error per entry is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64, order="C") for k, v in params.items()}

    def evaluate(values, record):
        tape = Tape(record=record)
        tensors = {k: tape.param(k, v) for k, v in values.items()}
        out = fn(tape, tensors)
        if not np.isfinite(out.value).all():
            raise NonFiniteError("grad_check: function value is not finite")
        return tape, out

    tape, loss = evaluate(params, True)
    analytic = tape.backward(loss)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate(params, False)[1].item()
            flat[i] = orig - eps
            f_minus = evaluate(params, False)[1].item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = np.abs(g_ad[i] - g_fd) / max(1e-8, np.abs(g_ad[i]) + np.abs(g_fd))
            worst = max(worst, float(err))
    return worst
