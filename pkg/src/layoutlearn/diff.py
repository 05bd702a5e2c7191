"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts plain ``numpy`` arrays or :class:`Var` handles.  When no
input is a :class:`Var` the primitive simply evaluates in numpy and returns an
array, so the same model code runs untaped for inference and finite-difference
probes, and taped for training.

The forward value of a taped op is computed by exactly the same numpy call as the
untaped path, which keeps the two routes bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "ContractError",
    "DomainError",
    "NonDeterministicLossError",
    "Tape",
    "Var",
    "ParamStore",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
    "PRIMITIVES",
]


class DomainError(ValueError):
    """Input outside the mathematical domain of a primitive (log/sqrt of negatives)."""


class ContractError(ValueError):
    """A caller violated an operation contract (shape, scalar output, ...)."""


class NonDeterministicLossError(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, in_shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def _sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _check_log(x):
    if np.any(np.asarray(x) < 0):
        raise DomainError("log of negative input")
    with np.errstate(divide="ignore"):
        return np.log(x)


def _check_sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise DomainError("sqrt of negative input")
    return np.sqrt(x)


def _extreme_vjp(g, out, x, axis=None, keepdims=False, arg=np.argmax):
    axes = _norm_axes(axis, x.ndim)
    rest = tuple(i for i in range(x.ndim) if i not in axes)
    perm = rest + axes
    xt = np.transpose(x, perm)
    rest_shape = xt.shape[: len(rest)]
    flat = xt.reshape(rest_shape + (-1,))
    # argmax/argmin return the first occurrence: deterministic tie rule
    idx = arg(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    g_rest = np.reshape(g, rest_shape)
    grad_t = (onehot * g_rest[..., None]).reshape(xt.shape)
    return (np.transpose(grad_t, np.argsort(perm)),)


def _binary_max(a, b):
    return np.where(a >= b, a, b)


def _binary_min(a, b):
    return np.where(a <= b, a, b)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def _getitem_vjp(g, out, x, index=None):
    grad = np.zeros_like(x)
    if _is_basic_index(index):
        grad[index] += g
    else:
        np.add.at(grad, index, g)
    return (grad,)


def _concat_vjp(g, out, *xs, axis=0):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _matmul_vjp(g, out, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable


def _max_forward(*xs, axis=None, keepdims=False):
    if len(xs) == 2:
        return _binary_max(xs[0], xs[1])
    return np.max(xs[0], axis=axis, keepdims=keepdims)


def _max_vjp(g, out, *xs, axis=None, keepdims=False):
    if len(xs) == 2:
        a, b = xs
        first = a >= b
        return _unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)
    return _extreme_vjp(g, out, xs[0], axis=axis, keepdims=keepdims, arg=np.argmax)


def _min_forward(*xs, axis=None, keepdims=False):
    if len(xs) == 2:
        return _binary_min(xs[0], xs[1])
    return np.min(xs[0], axis=axis, keepdims=keepdims)


def _min_vjp(g, out, *xs, axis=None, keepdims=False):
    if len(xs) == 2:
        a, b = xs
        first = a <= b
        return _unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)
    return _extreme_vjp(g, out, xs[0], axis=axis, keepdims=keepdims, arg=np.argmin)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": Primitive(np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": Primitive(np.multiply, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "div": Primitive(
        np.divide,
        lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)),
    ),
    "neg": Primitive(np.negative, lambda g, o, a: (-g,)),
    "exp": Primitive(np.exp, lambda g, o, a: (g * o,)),
    "log": Primitive(_check_log, lambda g, o, a: (g / a,)),
    "power": Primitive(
        lambda a, exponent=2.0: np.power(a, exponent),
        lambda g, o, a, exponent=2.0: (g * exponent * np.power(a, exponent - 1.0),),
    ),
    "sqrt": Primitive(_check_sqrt, lambda g, o, a: (g * 0.5 / o,)),
    "sigmoid": Primitive(_sigmoid, lambda g, o, a: (g * o * (1.0 - o),)),
    "softplus": Primitive(_softplus, lambda g, o, a: (g * -np.expm1(-o),)),
    "sin": Primitive(np.sin, lambda g, o, a: (g * np.cos(a),)),
    "cos": Primitive(np.cos, lambda g, o, a: (-g * np.sin(a),)),
    "max": Primitive(_max_forward, _max_vjp),
    "min": Primitive(_min_forward, _min_vjp),
    "sum": Primitive(
        lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, o, a, axis=None, keepdims=False: (
            _expand_reduced(g, a.shape, _norm_axes(axis, a.ndim), keepdims).copy(),
        ),
    ),
    "mean": Primitive(
        lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
        lambda g, o, a, axis=None, keepdims=False: (
            _expand_reduced(g, a.shape, _norm_axes(axis, a.ndim), keepdims)
            / (a.size // max(np.size(o), 1)),
        ),
    ),
    "matmul": Primitive(np.matmul, _matmul_vjp),
    "concat": Primitive(lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_vjp),
    "broadcast": Primitive(
        lambda a, shape=(): np.broadcast_to(a, shape).copy(),
        lambda g, o, a, shape=(): (_unbroadcast(g, a.shape),),
    ),
    # structural ops: no arithmetic, only index bookkeeping
    "reshape": Primitive(
        lambda a, shape=(): np.reshape(a, shape),
        lambda g, o, a, shape=(): (np.reshape(g, a.shape),),
    ),
    "transpose": Primitive(
        lambda a, axes=None: np.transpose(a, axes),
        lambda g, o, a, axes=None: (np.transpose(g, np.argsort(axes) if axes is not None else None),),
    ),
    "getitem": Primitive(lambda a, index=None: a[index], _getitem_vjp),
}


# --------------------------------------------------------------------------- tape


@dataclass
class _Node:
    kind: str
    parents: tuple  # node index per input, or None for constants
    inputs: tuple  # input values (arrays)
    attrs: dict
    value: np.ndarray


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so the record order is already a
    topological order and the backward sweep is a plain reverse scan.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        # name -> node index (indices, not handles, so the tape holds no cycles)
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "Var":
        value = np.array(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), {}, value))
        var = Var(value, self, len(self.nodes) - 1)
        if name is not None:
            if name in self.params:
                raise ContractError(f"parameter {name!r} already attached to this tape")
            self.params[name] = var.index
        return var

    def record(self, kind: str, *inputs, **attrs) -> "Var":
        try:
            prim = PRIMITIVES[kind]
        except KeyError:
            raise ContractError(f"unsupported operation kind {kind!r}") from None
        parents = []
        values = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ContractError("mixing handles from different tapes")
                parents.append(x.index)
                values.append(x.value)
            else:
                parents.append(None)
                values.append(np.asarray(x, dtype=np.float64))
        out = np.asarray(prim.forward(*values, **attrs), dtype=np.float64)
        self.nodes.append(_Node(kind, tuple(parents), tuple(values), attrs, out))
        return Var(out, self, len(self.nodes) - 1)


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, node={self.index})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def value_of(x):
    """Plain array behind ``x`` (identity for arrays)."""
    return x.value if isinstance(x, Var) else x


def _apply(kind: str, *inputs, **attrs):
    for x in inputs:
        if isinstance(x, Var):
            return x.tape.record(kind, *inputs, **attrs)
    return PRIMITIVES[kind].forward(*[np.asarray(x, dtype=np.float64) for x in inputs], **attrs)


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(a):
    return _apply("neg", a)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def power(a, exponent: float):
    return _apply("power", a, exponent=float(exponent))


def sqrt(a):
    return _apply("sqrt", a)


def sigmoid(a):
    return _apply("sigmoid", a)


def softplus(a):
    return _apply("softplus", a)


def sin(a):
    return _apply("sin", a)


def cos(a):
    return _apply("cos", a)


def maximum(a, b):
    """Elementwise max; ties route the gradient to ``a``."""
    return _apply("max", a, b)


def minimum(a, b):
    return _apply("min", a, b)


def amax(a, axis=None, keepdims=False):
    return _apply("max", a, axis=axis, keepdims=keepdims)


def amin(a, axis=None, keepdims=False):
    return _apply("min", a, axis=axis, keepdims=keepdims)


def sum_(a, axis=None, keepdims=False):
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _apply("mean", a, axis=axis, keepdims=keepdims)


def matmul(a, b):
    return _apply("matmul", a, b)


def concat(xs: Sequence, axis: int = 0):
    return _apply("concat", *xs, axis=axis)


def broadcast(a, shape):
    return _apply("broadcast", a, shape=tuple(shape))


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return _apply("transpose", a, axes=None if axes is None else tuple(axes))


def getitem(a, index):
    return _apply("getitem", a, index=index)


def clip(a, lo: float, hi: float):
    return minimum(maximum(a, lo), hi)


# --------------------------------------------------------------------------- backward


def backward(tape: Tape, output: Var, store: "ParamStore | None" = None) -> list:
    """Reverse sweep from a scalar ``output``.

    Returns the per-node gradient list.  With ``store`` given, gradients of every
    parameter attached to ``tape`` are accumulated into the store's buffers;
    parameters the output does not depend on receive an exact zero.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ContractError("output must be a handle recorded on this tape")
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.value.shape}")

    grads: list = [None] * len(tape.nodes)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.kind == "leaf":
            continue
        local = PRIMITIVES[node.kind].vjp(g, node.value, *node.inputs, **node.attrs)
        for parent, gp in zip(node.parents, local):
            if parent is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.asarray(gp, dtype=np.float64)
            else:
                grads[parent] = grads[parent] + gp

    if store is not None:
        for name, index in tape.params.items():
            g = grads[index]
            if g is not None:
                store.grads[name] += g
    return grads


# --------------------------------------------------------------------------- parameters


@dataclass
class ParamEntry:
    value: np.ndarray
    lr_mult: float = 1.0
    frozen: bool = False


class ParamStore:
    """Named float64 parameter arrays with gradient buffers and per-entry flags.

    Entries are addressed by slash-separated names (``"field0/w0"``,
    ``"layout/1/0"``); the prefix before the first slash acts as the group.
    """

    def __init__(self) -> None:
        self.entries: dict[str, ParamEntry] = {}
        self.grads: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def add(self, name: str, value, lr_mult: float = 1.0, frozen: bool = False) -> np.ndarray:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.entries[name] = ParamEntry(arr, float(lr_mult), bool(frozen))
        self.grads[name] = np.zeros_like(arr)
        return arr

    def set(self, name: str, value) -> None:
        entry = self.entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise ContractError(f"shape mismatch for {name!r}: {value.shape} vs {entry.value.shape}")
        entry.value[...] = value

    def freeze(self, prefix: str, frozen: bool = True) -> None:
        hit = self.names(prefix)
        if not hit:
            raise KeyError(f"no parameters match prefix {prefix!r}")
        for n in hit:
            self.entries[n].frozen = frozen

    def is_frozen(self, name: str) -> bool:
        return self.entries[name].frozen

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def attach(self, tape: Tape, names: Iterable[str] | None = None) -> dict[str, Var]:
        """Record every (or the named) parameter as a leaf on ``tape``."""
        names = list(self.entries) if names is None else list(names)
        return {n: tape.leaf(self.entries[n].value, name=n) for n in names}

    def values(self) -> dict[str, np.ndarray]:
        return {n: e.value for n, e in self.entries.items()}

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return int(
            sum(
                e.value.size
                for n, e in self.entries.items()
                if n.startswith(prefix) and not (trainable_only and e.frozen)
            )
        )

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.entries[n].value).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------- FD harness


@dataclass
class FiniteDiffReport:
    """Per-parameter relative-error summary from :func:`finite_diff_check`."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    mean_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __bool__(self) -> bool:
        return bool(self.max_rel_error)

    def passes(self, tol: float) -> bool:
        return self.worst <= tol

    def lines(self) -> list[str]:
        return [
            f"{n}: checked={self.n_checked[n]} max={self.max_rel_error[n]:.3e} mean={self.mean_rel_error[n]:.3e}"
            for n in self.max_rel_error
        ]


def relative_error(g_ad, g_fd):
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    return np.abs(g_ad - g_fd) / np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[Mapping], object],
    store: ParamStore,
    h: float = 1e-4,
    indices: Mapping[str, Sequence[int]] | None = None,
) -> FiniteDiffReport:
    """Compare taped gradients against central differences.

    ``loss_fn`` maps a ``{name: array-or-Var}`` mapping to a scalar and must be
    deterministic (seed any internal randomness inside it).  Frozen entries are
    skipped.  ``indices`` restricts the probe to given flat indices per entry.
    """
    names = [n for n, e in store.entries.items() if not e.frozen]
    if indices is not None:
        names = [n for n in names if n in indices]
    report = FiniteDiffReport()
    if not names:
        return report

    def evaluate() -> float:
        return float(np.asarray(value_of(loss_fn(store.values()))).reshape(()))

    base = evaluate()
    if evaluate() != base:
        raise NonDeterministicLossError("loss changed between two identical evaluations; seed its randomness")

    tape = Tape()
    handles = store.attach(tape)
    out = loss_fn(handles)
    if not isinstance(out, Var):
        raise ContractError("loss does not depend on any parameter")
    grads = backward(tape, out)

    for n in names:
        value = store[n]
        g = grads[handles[n].index]
        g = np.zeros_like(value) if g is None else g
        flat_idx = np.arange(value.size) if indices is None else np.asarray(indices[n], dtype=int)
        flat = value.reshape(-1)
        errs = []
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            errs.append(float(relative_error(g.reshape(-1)[i], g_fd)))
        report.max_rel_error[n] = max(errs)
        report.mean_rel_error[n] = float(np.mean(errs))
        report.n_checked[n] = len(errs)
    logger.debug("finite-difference check: worst relative error %.3e", report.worst)
    return report
