"""Reverse-mode automatic differentiation on an append-only tape.

Nodes hold float64 numpy arrays (scalars, vectors or matrices). Every
vector-Jacobian rule is written against the module-level op functions, which
dispatch on their arguments: fed plain arrays they compute numerically, fed
:class:`Var` handles they record new nodes. The numeric :meth:`Tape.backward`
and the graph-building :meth:`Tape.gradient_node` therefore share one set of
rules, and gradients produced by ``gradient_node`` can be differentiated again
(reverse-over-reverse).

Example::

    tape = Tape()
    x = tape.leaf(3.0)
    y = x * x
    (dx,) = tape.backward(y, [x])   # 6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tape",
    "Var",
    "AdamState",
    "adam_step",
    "NonFiniteGradientError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "absolute",
    "power",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "getitem",
    "scatter",
    "concat",
    "norm",
]


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(#{self.index} {self.tape.ops[self.index]}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis)


class Tape:
    """Append-only record of array operations.

    ``ops[i]``, ``parents[i]``, ``aux[i]`` and ``values[i]`` describe node
    ``i``. Parents always have smaller indices than their children.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.aux: list[dict] = []
        self.values: list[np.ndarray] = []
        self.trainable: list[int] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op: str, parents: tuple[int, ...], aux: dict, value: np.ndarray) -> Var:
        self.ops.append(op)
        self.parents.append(parents)
        self.aux.append(aux)
        self.values.append(value)
        return Var(self, len(self.ops) - 1)

    def leaf(self, value, trainable: bool = False) -> Var:
        var = self._push("leaf", (), {}, np.array(value, dtype=np.float64))
        if trainable:
            self.trainable.append(var.index)
        return var

    def parameter(self, value) -> Var:
        return self.leaf(value, trainable=True)

    def constant(self, value) -> Var:
        return self._push("const", (), {}, np.array(value, dtype=np.float64))

    def leaves(self) -> list[Var]:
        return [Var(self, i) for i, op in enumerate(self.ops) if op == "leaf"]

    def _as_var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.constant(x)

    def apply(self, op: str, args: Sequence[Any], aux: dict | None = None) -> Var:
        aux = aux or {}
        vars_ = [self._as_var(a) for a in args]
        value = _FORWARD[op](*(v.value for v in vars_), **aux)
        return self._push(op, tuple(v.index for v in vars_), aux, value)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from the leaves (optionally substituted)."""
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for i, op in enumerate(self.ops):
            if op in ("leaf", "const"):
                out.append(np.asarray(leaf_values.get(i, self.values[i]), dtype=np.float64))
            else:
                out.append(_FORWARD[op](*(out[p] for p in self.parents[i]), **self.aux[i]))
        return out

    def _check_output(self, output: Var) -> None:
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output is not a node of this tape")
        if output.value.size != 1:
            raise ValueError(
                f"backward needs a scalar output, node #{output.index} has shape {output.shape}"
            )

    def _needs(self, output: Var, targets: set[int], stop: int) -> list[bool]:
        """``needs[i]``: node ``i`` depends on one of ``targets``."""
        needs = [False] * (output.index + 1)
        for i in range(stop, output.index + 1):
            if i in targets:
                needs[i] = True
            elif self.ops[i] not in ("leaf", "const"):
                needs[i] = any(p >= stop and needs[p] for p in self.parents[i])
        return needs

    def backward(self, output: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
        """Numeric gradients of scalar ``output`` w.r.t. ``wrt`` (default: all leaves).

        Unreachable nodes get a zero gradient of their own shape.
        """
        self._check_output(output)
        wrt = self.leaves() if wrt is None else list(wrt)
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise ValueError("wrt entries must be nodes of this tape")
        targets = {w.index for w in wrt if w.index <= output.index}
        stop = min(targets, default=output.index)
        needs = self._needs(output, targets, stop)
        cot: list[np.ndarray | None] = [None] * (output.index + 1)
        cot[output.index] = np.ones_like(output.value)
        values = self.values
        for i in range(output.index, stop - 1, -1):
            g = cot[i]
            if g is None or not needs[i] or self.ops[i] in ("leaf", "const"):
                continue
            pidx = self.parents[i]
            need = [p >= stop and needs[p] for p in pidx]
            grads = _VJP[self.ops[i]](g, [values[p] for p in pidx], values[i], self.aux[i], need)
            for p, gp, nd in zip(pidx, grads, need):
                if gp is None or not nd:
                    continue
                cot[p] = gp if cot[p] is None else cot[p] + gp
        out = []
        for w in wrt:
            g = cot[w.index] if w.index < len(cot) else None
            out.append(np.zeros_like(w.value) if g is None else np.broadcast_to(g, w.shape).copy())
        return out

    def gradient_node(self, output: Var, wrt: Var) -> Var:
        """Append nodes computing d(output)/d(wrt); the result stays differentiable."""
        self._check_output(output)
        if not isinstance(wrt, Var) or wrt.tape is not self or wrt.index >= len(self.ops):
            raise ValueError("wrt is not a node of this tape")
        if wrt.index > output.index:
            return self.constant(np.zeros_like(wrt.value))
        stop = wrt.index
        needs = self._needs(output, {stop}, stop)
        cot: dict[int, Var] = {output.index: self.constant(np.ones_like(output.value))}
        for i in range(output.index, stop, -1):
            g = cot.pop(i, None)
            if g is None or not needs[i] or self.ops[i] in ("leaf", "const"):
                continue
            pidx = self.parents[i]
            need = [p >= stop and needs[p] for p in pidx]
            prim = [Var(self, p) for p in pidx]
            grads = _VJP[self.ops[i]](g, prim, Var(self, i), self.aux[i], need)
            for p, gp, nd in zip(pidx, grads, need):
                if gp is None or not nd:
                    continue
                cot[p] = gp if p not in cot else add(cot[p], gp)
        g = cot.get(stop)
        if g is None:
            return self.constant(np.zeros_like(wrt.value))
        if g.shape != wrt.shape:
            g = broadcast_to(g, wrt.shape)
        return g


# ---------------------------------------------------------------------------
# dispatching op helpers


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, (Var, np.ndarray)) else np.shape(x)


def _dispatch(op: str, *args, **aux):
    tape = _tape_of(args)
    if tape is None:
        return _FORWARD[op](*(np.asarray(a, dtype=np.float64) for a in args), **aux)
    return tape.apply(op, args, aux)


def add(a, b):
    return _dispatch("add", a, b)


def sub(a, b):
    return _dispatch("sub", a, b)


def mul(a, b):
    return _dispatch("mul", a, b)


def div(a, b):
    return _dispatch("div", a, b)


def neg(a):
    return _dispatch("neg", a)


def matmul(a, b):
    return _dispatch("matmul", a, b)


def transpose(a):
    return _dispatch("transpose", a)


def tanh(a):
    return _dispatch("tanh", a)


def sigmoid(a):
    return _dispatch("sigmoid", a)


def softplus(a, beta: float = 1.0):
    return _dispatch("softplus", a, beta=float(beta))


def relu(a):
    return _dispatch("relu", a)


def exp(a):
    return _dispatch("exp", a)


def log(a):
    return _dispatch("log", a)


def sqrt(a):
    return _dispatch("sqrt", a)


def square(a):
    return _dispatch("square", a)


def absolute(a):
    return _dispatch("abs", a)


def power(a, p: float):
    return _dispatch("power", a, p=float(p))


def sum(a, axis: int | None = None):  # noqa: A001 - mirrors numpy
    return _dispatch("sum", a, axis=axis)


def mean(a, axis: int | None = None):
    n = _value(a).size if axis is None else _shape(a)[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape):
    return _dispatch("reshape", a, shape=tuple(shape))


def broadcast_to(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _dispatch("broadcast_to", a, shape=shape)


def sum_to(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _dispatch("sum_to", a, shape=shape)


def getitem(a, key):
    return _dispatch("getitem", a, key=key)


def scatter(a, key, shape):
    return _dispatch("scatter", a, key=key, shape=tuple(shape))


def concat(items: Sequence, axis: int = -1):
    tape = _tape_of(items)
    if tape is None:
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in items], axis=axis)
    return tape.apply("concat", list(items), {"axis": axis})


def norm(a, axis: int = -1):
    """Euclidean norm along ``axis`` (kept as a size-1 axis); subgradient 0 at the origin."""
    return _dispatch("norm", a, axis=axis)


# ---------------------------------------------------------------------------
# forward kernels


def _np_sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _np_scatter(g: np.ndarray, key, shape) -> np.ndarray:
    out = np.zeros(shape)
    np.add.at(out, key, g)
    return out


def _np_norm(x: np.ndarray, axis: int) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=axis, keepdims=True))


def _np_softplus(a: np.ndarray, beta: float) -> np.ndarray:
    z = beta * a
    return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta


def _np_concat(*xs, axis):
    return np.concatenate(xs, axis=axis)


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "neg": np.negative,
    "matmul": np.matmul,
    "transpose": lambda a: np.ascontiguousarray(a.T),
    "tanh": np.tanh,
    "sigmoid": expit,
    "softplus": _np_softplus,
    "relu": lambda a: np.maximum(a, 0.0),
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "square": np.square,
    "abs": np.abs,
    "power": lambda a, p: np.power(a, p),
    "sum": lambda a, axis: np.asarray(np.sum(a, axis=axis)),
    "reshape": lambda a, shape: a.reshape(shape),
    "broadcast_to": lambda a, shape: np.broadcast_to(a, shape).copy(),
    "sum_to": _np_sum_to,
    "getitem": lambda a, key: np.asarray(a[key]).copy(),
    "scatter": _np_scatter,
    "concat": _np_concat,
    "norm": _np_norm,
}


# ---------------------------------------------------------------------------
# vector-Jacobian rules; each returns one cotangent per parent, None where the
# parent does not lead to a requested input (``need`` flags)


def _vjp_add(g, p, out, aux, need):
    a, b = p
    return (
        sum_to(g, _shape(a)) if need[0] else None,
        sum_to(g, _shape(b)) if need[1] else None,
    )


def _vjp_sub(g, p, out, aux, need):
    a, b = p
    return (
        sum_to(g, _shape(a)) if need[0] else None,
        sum_to(neg(g), _shape(b)) if need[1] else None,
    )


def _vjp_mul(g, p, out, aux, need):
    a, b = p
    return (
        sum_to(mul(g, b), _shape(a)) if need[0] else None,
        sum_to(mul(g, a), _shape(b)) if need[1] else None,
    )


def _vjp_div(g, p, out, aux, need):
    a, b = p
    ga = div(g, b)
    return (
        sum_to(ga, _shape(a)) if need[0] else None,
        sum_to(neg(mul(ga, out)), _shape(b)) if need[1] else None,
    )


def _vjp_matmul(g, p, out, aux, need):
    a, b = p
    return (
        matmul(g, transpose(b)) if need[0] else None,
        matmul(transpose(a), g) if need[1] else None,
    )


def _vjp_norm(g, p, out, aux, need):
    (x,) = p
    mask = (_value(out) > 0.0).astype(np.float64)
    safe = add(mul(out, mask), 1.0 - mask)
    return (mul(g, div(x, safe)),)


def _vjp_sum(g, p, out, aux, need):
    (a,) = p
    shape = _shape(a)
    axis = aux["axis"]
    if axis is None:
        kshape = (1,) * len(shape)
    else:
        kshape = list(shape)
        kshape[axis] = 1
    return (broadcast_to(reshape(g, kshape), shape),)


def _vjp_concat(g, p, out, aux, need):
    axis = aux["axis"]
    ndim = len(_shape(out))
    ax = axis % ndim
    grads = []
    start = 0
    for x, nd in zip(p, need):
        n = _shape(x)[ax]
        key = tuple([slice(None)] * ax + [slice(start, start + n)])
        grads.append(getitem(g, key) if nd else None)
        start += n
    return grads


def _unary(rule):
    return lambda g, p, out, aux, need: (rule(g, p[0], out, aux),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "norm": _vjp_norm,
    "sum": _vjp_sum,
    "concat": _vjp_concat,
    "neg": _unary(lambda g, x, out, aux: neg(g)),
    "transpose": _unary(lambda g, x, out, aux: transpose(g)),
    "tanh": _unary(lambda g, x, out, aux: mul(g, sub(1.0, square(out)))),
    "sigmoid": _unary(lambda g, x, out, aux: mul(g, mul(out, sub(1.0, out)))),
    "softplus": _unary(lambda g, x, out, aux: mul(g, sigmoid(mul(x, aux["beta"])))),
    "relu": _unary(lambda g, x, out, aux: mul(g, (_value(x) > 0.0).astype(np.float64))),
    "exp": _unary(lambda g, x, out, aux: mul(g, out)),
    "log": _unary(lambda g, x, out, aux: div(g, x)),
    "sqrt": _unary(lambda g, x, out, aux: div(mul(g, 0.5), out)),
    "square": _unary(lambda g, x, out, aux: mul(g, mul(x, 2.0))),
    "abs": _unary(lambda g, x, out, aux: mul(g, np.sign(_value(x)))),
    "power": _unary(lambda g, x, out, aux: mul(g, mul(power(x, aux["p"] - 1.0), aux["p"]))),
    "reshape": _unary(lambda g, x, out, aux: reshape(g, _shape(x))),
    "broadcast_to": _unary(lambda g, x, out, aux: sum_to(g, _shape(x))),
    "sum_to": _unary(lambda g, x, out, aux: broadcast_to(g, _shape(x))),
    "getitem": _unary(lambda g, x, out, aux: scatter(g, aux["key"], _shape(x))),
    "scatter": _unary(lambda g, x, out, aux: getitem(g, aux["key"])),
}


# ---------------------------------------------------------------------------
# Adam


class NonFiniteGradientError(FloatingPointError):
    """A gradient entry is NaN or infinite."""

    def __init__(self, param_index: int, flat_index: int):
        super().__init__(
            f"non-finite gradient in parameter {param_index} at flat element {flat_index}"
        )
        self.param_index = param_index
        self.flat_index = flat_index


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float | Sequence[float],
) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; ``state`` advances in place.

    ``lr`` is either one rate or one rate per parameter array.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(p) != state.m[k].shape:
            raise ValueError(f"shape mismatch for parameter {k}: {np.shape(p)} vs {np.shape(g)}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteGradientError(k, int(np.flatnonzero(bad)[0]))
    rates = [float(lr)] * len(params) if np.isscalar(lr) else [float(r) for r in lr]

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - rates[k] * mhat / (np.sqrt(vhat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# flat parameter serialization


def pack_parameters(params: Sequence[np.ndarray]) -> bytes:
    """Concatenate parameters as little-endian float64."""
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)


def unpack_parameters(
    buf: bytes, shapes: Sequence[tuple[int, ...]], offset: int = 0
) -> tuple[list[np.ndarray], int]:
    """Inverse of :func:`pack_parameters`; returns the arrays and the end offset."""
    out = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * n > len(buf):
            raise ValueError("parameter buffer is truncated")
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += 8 * n
    return out, offset
