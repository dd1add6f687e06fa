"""Dense float64 tensors with a recording tape for reverse-mode gradients.

The tape is a flat, append-only list of nodes.  Because an operation can
only consume tensors that already exist, creation order is a topological
order, and one reversed sweep propagates adjoints to every parameter leaf.

Jacobians of small vector maps are produced by forward-mode lifting: a
:class:`Dual` carries a tangent tensor whose trailing axes hold one column
per seed direction, and every lifted primitive builds its tangent out of
ordinary tape operations.  The resulting Jacobian is therefore itself a
node on the tape, so a downstream ``logdet`` can be differentiated with
respect to any parameters the map closes over.

All operations also accept plain ``numpy`` arrays, in which case they
evaluate eagerly and record nothing.  This gives one implementation of
every numeric map three modes: recorded, recorded-with-Jacobian, and raw.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit, logsumexp as _sp_logsumexp


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class SingularMatrixError(ArithmeticError):
    """logdet met a matrix with non-positive or vanishing determinant."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node on a tape: a float64 array plus links to its parents."""

    __slots__ = ("tape", "idx", "data", "parents", "vjp", "requires_grad", "op")
    __array_ufunc__ = None  # keep numpy from absorbing us in mixed expressions

    def __init__(self, tape: "Tape", idx: int, data: np.ndarray, parents, vjp, requires_grad: bool, op: str):
        self.tape = tape
        self.idx = idx
        self.data = data
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only operation record.  Single-threaded by contract."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def _record(self, op: str, parents, data: np.ndarray, vjp, requires_grad: bool) -> Tensor:
        t = Tensor(self, len(self.nodes), data, tuple(parents), vjp, requires_grad, op)
        self.nodes.append(t)
        return t

    def constant(self, data, op: str = "const") -> Tensor:
        a = _as_array(data)
        if not np.all(np.isfinite(a)):
            raise ValueError("constant rejects non-finite entries")
        return self._record(op, (), a, None, False)

    def leaf(self, data) -> Tensor:
        """A trainable parameter.  Gradients are collected for every leaf."""
        a = np.array(data, dtype=np.float64)  # owned copy; training mutates the original
        if not np.all(np.isfinite(a)):
            raise ValueError("leaf rejects non-finite entries")
        t = self._record("leaf", (), a, None, True)
        self.leaves.append(t)
        return t


class Gradient:
    """Adjoints keyed by leaf: every requires-grad leaf has an entry."""

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return self._grads[leaf.idx]

    def __contains__(self, leaf: Tensor) -> bool:
        return leaf.idx in self._grads

    def __len__(self):
        return len(self._grads)


def backward(out: Tensor) -> Gradient:
    """Reverse sweep from a scalar node; the tape stays intact for reuse."""
    if not isinstance(out, Tensor):
        raise ContractError("backward expects a tape node")
    if out.data.ndim != 0:
        raise ContractError(f"backward expects a scalar node, got shape {out.data.shape}")
    tape = out.tape
    grads: list = [None] * len(tape.nodes)
    grads[out.idx] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes[: out.idx + 1]):
        g = grads[node.idx]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if grads[parent.idx] is None:
                grads[parent.idx] = pg
            else:
                grads[parent.idx] = grads[parent.idx] + pg
    result = {}
    for leaf in tape.leaves:
        g = grads[leaf.idx]
        result[leaf.idx] = np.zeros_like(leaf.data) if g is None else g
    return Gradient(result, tape)


class Dual:
    """Forward-mode pair: ``tangent`` carries one column per seed direction.

    For a value of shape (..., f) the tangent has shape (..., s, f); seeds
    are the s basis directions of the differentiated input.
    """

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = value
        self.tangent = tangent

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


Arr = Union[Tensor, np.ndarray]


def value_of(x) -> np.ndarray:
    """Numeric payload of a Tensor, Dual, or array."""
    if isinstance(x, Dual):
        x = x.value
    if isinstance(x, Tensor):
        return x.data
    return _as_array(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ContractError("operands live on different tapes")
    return tape


def _coerce_pair(a, b):
    """Promote a/b so both are Tensors on one tape, or both raw arrays."""
    tape = _tape_of(a, b)
    if tape is None:
        return _as_array(a), _as_array(b), None
    if not isinstance(a, Tensor):
        a = tape.constant(a)
    if not isinstance(b, Tensor):
        b = tape.constant(b)
    return a, b, tape


def _same_shape(a, b, op):
    if value_of(a).shape != value_of(b).shape:
        raise ShapeError(f"{op}: shape mismatch {value_of(a).shape} vs {value_of(b).shape}")


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if isinstance(a, Dual) and isinstance(b, Dual):
            return Dual(add(a.value, b.value), add(a.tangent, b.tangent))
        if isinstance(a, Dual):
            return Dual(add(a.value, b), a.tangent)
        return Dual(add(a, b.value), b.tangent)
    a, b, tape = _coerce_pair(a, b)
    _same_shape(a, b, "add")
    if tape is None:
        return a + b
    return tape._record("add", (a, b), a.data + b.data,
                        lambda g: (g, g), a.requires_grad or b.requires_grad)


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if isinstance(a, Dual) and isinstance(b, Dual):
            return Dual(sub(a.value, b.value), sub(a.tangent, b.tangent))
        if isinstance(a, Dual):
            return Dual(sub(a.value, b), a.tangent)
        return Dual(sub(a, b.value), scale(b.tangent, -1.0))
    a, b, tape = _coerce_pair(a, b)
    _same_shape(a, b, "sub")
    if tape is None:
        return a - b
    return tape._record("sub", (a, b), a.data - b.data,
                        lambda g: (g, -g), a.requires_grad or b.requires_grad)


def mul(a, b):
    """Elementwise product of same-shape operands."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        if isinstance(a, Dual) and isinstance(b, Dual):
            t = add(rowscale(b.value, a.tangent), rowscale(a.value, b.tangent))
            return Dual(mul(a.value, b.value), t)
        if isinstance(a, Dual):
            return Dual(mul(a.value, b), rowscale(b, a.tangent))
        return Dual(mul(a, b.value), rowscale(a, b.tangent))
    a, b, tape = _coerce_pair(a, b)
    _same_shape(a, b, "mul")
    if tape is None:
        return a * b
    return tape._record("mul", (a, b), a.data * b.data,
                        lambda g: (g * b.data, g * a.data),
                        a.requires_grad or b.requires_grad)


def scale(a, c: float):
    """Multiply by a Python scalar constant."""
    c = float(c)
    if isinstance(a, Dual):
        return Dual(scale(a.value, c), scale(a.tangent, c))
    if not isinstance(a, Tensor):
        return _as_array(a) * c
    return a.tape._record("scale", (a,), a.data * c,
                          lambda g: (g * c,), a.requires_grad)


def add_scalar(a, c: float):
    c = float(c)
    if isinstance(a, Dual):
        return Dual(add_scalar(a.value, c), a.tangent)
    if not isinstance(a, Tensor):
        return _as_array(a) + c
    return a.tape._record("add_scalar", (a,), a.data + c,
                          lambda g: (g,), a.requires_grad)


def add_bias(x, b):
    """Add a vector to the last axis of x (the one broadcast this tape allows)."""
    if isinstance(x, Dual):
        if isinstance(b, Dual):
            raise ContractError("add_bias: bias cannot carry a tangent")
        return Dual(add_bias(x.value, b), x.tangent)
    x, b, tape = _coerce_pair(x, b)
    xv, bv = value_of(x), value_of(b)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeError(f"add_bias: {xv.shape} + {bv.shape}")
    if tape is None:
        return xv + bv

    def vjp(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes) if axes else g

    return tape._record("add_bias", (x, b), xv + bv, vjp,
                        x.requires_grad or b.requires_grad)


def rowscale(v, t):
    """Multiply t of shape (..., s, f) by v of shape (..., f) along the last axis."""
    if isinstance(v, Dual) or isinstance(t, Dual):
        raise ContractError("rowscale is a tangent-side primitive; it does not lift")
    v, t, tape = _coerce_pair(v, t)
    vv, tv = value_of(v), value_of(t)
    if vv.shape != tv.shape[:-2] + tv.shape[-1:]:
        raise ShapeError(f"rowscale: {vv.shape} against {tv.shape}")
    out = vv[..., None, :] * tv
    if tape is None:
        return out

    def vjp(g):
        return (g * tv).sum(axis=-2), vv[..., None, :] * g

    return tape._record("rowscale", (v, t), out, vjp,
                        v.requires_grad or t.requires_grad)


# ---------------------------------------------------------------------------
# matmul (2D cases plus stacked-left 3D, which covers tangent propagation)


def _matmul_raw(av, bv):
    if av.ndim >= 3 and bv.ndim == 2:
        lead = av.shape[:-1]
        out = np.reshape(av, (-1, av.shape[-1])) @ bv
        return out.reshape(lead + (bv.shape[1],))
    return av @ bv


def matmul(a, b):
    if isinstance(a, Dual) and isinstance(b, Dual):
        raise ContractError("matmul: at most one operand may carry a tangent")
    if isinstance(a, Dual):
        return Dual(matmul(a.value, b), matmul(a.tangent, b))
    if isinstance(b, Dual):
        bv = value_of(b.value)
        if bv.ndim != 1:
            raise ContractError("matmul: right-tangent only supported for vectors")
        # d(a @ x) = a @ dx; columns transform independently
        return Dual(matmul(a, b.value), matmul(b.tangent, transpose(a)))
    a, b, tape = _coerce_pair(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul: operands must be at least 1-D")
    if av.shape[-1] != bv.shape[0] and not (av.ndim == 1 and bv.ndim == 2 and av.shape[0] == bv.shape[0]):
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    if bv.ndim > 2:
        raise ShapeError("matmul: right operand must be 1-D or 2-D")
    out = _matmul_raw(av, bv)
    if tape is None:
        return out

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1 and bv.ndim == 2:      # (i,) @ (i,j) -> (j,)
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:                       # (..., k) @ (k,) -> (...,)
            if av.ndim == 2:
                return np.outer(g, bv), av.T @ g
            return g[..., None] * bv, np.reshape(av, (-1, av.shape[-1])).T @ g.ravel()
        # (..., i, k) @ (k, j)
        ga = _matmul_raw(g, bv.T)
        a2 = np.reshape(av, (-1, av.shape[-1]))
        g2 = np.reshape(g, (-1, g.shape[-1]))
        return ga, a2.T @ g2

    return tape._record("matmul", (a, b), out, vjp,
                        a.requires_grad or b.requires_grad)


def transpose(a):
    """Swap the last two axes."""
    if isinstance(a, Dual):
        raise ContractError("transpose does not lift")
    if not isinstance(a, Tensor):
        return np.swapaxes(_as_array(a), -1, -2)
    out = np.swapaxes(a.data, -1, -2).copy()
    return a.tape._record("transpose", (a,), out,
                          lambda g: (np.swapaxes(g, -1, -2),), a.requires_grad)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(x):
    if isinstance(x, Dual):
        y = tanh(x.value)
        slope = add_scalar(scale(mul(y, y), -1.0), 1.0)  # 1 - tanh^2
        return Dual(y, rowscale(slope, x.tangent))
    if not isinstance(x, Tensor):
        return np.tanh(_as_array(x))
    out = np.tanh(x.data)
    return x.tape._record("tanh", (x,), out,
                          lambda g: (g * (1.0 - out * out),), x.requires_grad)


def sigmoid(x):
    if isinstance(x, Dual):
        y = sigmoid(x.value)
        slope = mul(y, add_scalar(scale(y, -1.0), 1.0))  # y(1-y)
        return Dual(y, rowscale(slope, x.tangent))
    if not isinstance(x, Tensor):
        return expit(_as_array(x))
    out = expit(x.data)
    return x.tape._record("sigmoid", (x,), out,
                          lambda g: (g * out * (1.0 - out),), x.requires_grad)


def softplus(x):
    if isinstance(x, Dual):
        return Dual(softplus(x.value), rowscale(sigmoid(x.value), x.tangent))
    if not isinstance(x, Tensor):
        return np.logaddexp(0.0, _as_array(x))
    out = np.logaddexp(0.0, x.data)
    return x.tape._record("softplus", (x,), out,
                          lambda g: (g * expit(x.data),), x.requires_grad)


def exp(x):
    if isinstance(x, Dual):
        y = exp(x.value)
        return Dual(y, rowscale(y, x.tangent))
    if not isinstance(x, Tensor):
        return np.exp(_as_array(x))
    out = np.exp(x.data)
    return x.tape._record("exp", (x,), out,
                          lambda g: (g * out,), x.requires_grad)


def log(x):
    if isinstance(x, Dual):
        raise ContractError("log has no forward-mode rule (not used inside lifted maps)")
    if not isinstance(x, Tensor):
        return np.log(_as_array(x))
    return x.tape._record("log", (x,), np.log(x.data),
                          lambda g: (g / x.data,), x.requires_grad)


def sqrt(x):
    if isinstance(x, Dual):
        r = rsqrt(x.value)
        return Dual(sqrt(x.value), rowscale(scale(r, 0.5), x.tangent))
    if not isinstance(x, Tensor):
        return np.sqrt(_as_array(x))
    out = np.sqrt(x.data)
    return x.tape._record("sqrt", (x,), out,
                          lambda g: (g * 0.5 / out,), x.requires_grad)


def rsqrt(x):
    """Reciprocal square root, x ** -0.5."""
    if isinstance(x, Dual):
        r = rsqrt(x.value)
        slope = scale(mul(mul(r, r), r), -0.5)  # -x^{-3/2}/2
        return Dual(r, rowscale(slope, x.tangent))
    if not isinstance(x, Tensor):
        return _as_array(x) ** -0.5
    out = x.data ** -0.5
    return x.tape._record("rsqrt", (x,), out,
                          lambda g: (g * (-0.5) * out / x.data,), x.requires_grad)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(x):
    """Sum of all entries, a scalar."""
    if isinstance(x, Dual):
        raise ContractError("tsum has no forward-mode rule")
    if not isinstance(x, Tensor):
        return _as_array(x).sum()
    xd = x.data
    return x.tape._record("sum", (x,), np.asarray(xd.sum()),
                          lambda g: (np.broadcast_to(g, xd.shape),), x.requires_grad)


def sum_last(x):
    """Sum over the last axis."""
    if isinstance(x, Dual):
        raise ContractError("sum_last has no forward-mode rule")
    if not isinstance(x, Tensor):
        return _as_array(x).sum(axis=-1)
    xd = x.data
    return x.tape._record("sum_last", (x,), xd.sum(axis=-1),
                          lambda g: (np.broadcast_to(g[..., None], xd.shape),),
                          x.requires_grad)


def sqnorm(x):
    """Squared Euclidean norm of all entries, a scalar."""
    if isinstance(x, Dual):
        raise ContractError("sqnorm has no forward-mode rule")
    if not isinstance(x, Tensor):
        a = _as_array(x)
        return (a * a).sum()
    xd = x.data
    return x.tape._record("sqnorm", (x,), np.asarray((xd * xd).sum()),
                          lambda g: (2.0 * g * xd,), x.requires_grad)


def trace(x):
    if isinstance(x, Dual):
        raise ContractError("trace has no forward-mode rule")
    xv = value_of(x)
    if xv.ndim != 2 or xv.shape[0] != xv.shape[1]:
        raise ShapeError(f"trace expects a square matrix, got {xv.shape}")
    if not isinstance(x, Tensor):
        return np.trace(xv)
    n = xv.shape[0]
    return x.tape._record("trace", (x,), np.asarray(np.trace(xv)),
                          lambda g: (g * np.eye(n),), x.requires_grad)


def stack_last(xs: Sequence):
    """Stack same-shape tensors along a new trailing axis."""
    duals = [x for x in xs if isinstance(x, Dual)]
    if duals:
        raise ContractError("stack_last has no forward-mode rule")
    tape = _tape_of(*xs)
    if tape is None:
        return np.stack([_as_array(x) for x in xs], axis=-1)
    xs = [x if isinstance(x, Tensor) else tape.constant(x) for x in xs]
    base = xs[0].data.shape
    for x in xs:
        if x.data.shape != base:
            raise ShapeError("stack_last: mixed shapes")
    out = np.stack([x.data for x in xs], axis=-1)

    def vjp(g):
        return tuple(g[..., i] for i in range(len(xs)))

    return tape._record("stack_last", tuple(xs), out, vjp,
                        any(x.requires_grad for x in xs))


def logsumexp_last(x):
    """Numerically stable log-sum-exp over the last axis."""
    if isinstance(x, Dual):
        raise ContractError("logsumexp_last has no forward-mode rule")
    if not isinstance(x, Tensor):
        return _sp_logsumexp(_as_array(x), axis=-1)
    out = _sp_logsumexp(x.data, axis=-1)

    def vjp(g):
        w = np.exp(x.data - out[..., None])
        return (g[..., None] * w,)

    return x.tape._record("logsumexp_last", (x,), out, vjp, x.requires_grad)


# ---------------------------------------------------------------------------
# log-determinant


_LOGDET_FLOOR = np.log(1e-300)


def _slogdet_checked(m: np.ndarray) -> np.ndarray:
    sign, ld = np.linalg.slogdet(m)
    bad = (sign <= 0) | (ld < _LOGDET_FLOOR)
    if np.any(bad):
        idx = np.argwhere(bad)
        where = "matrix" if m.ndim == 2 else f"batch index {idx[0]}"
        raise SingularMatrixError(
            f"logdet: determinant not strictly positive at {where} "
            f"(sign={np.min(sign)}, logdet floor {_LOGDET_FLOOR:.1f})")
    return ld


def logdet(m):
    """log det of one (n, n) matrix or a (..., n, n) batch, via pivoted LU.

    The determinant must be strictly positive; contractive residual
    transition maps guarantee this, so a failure signals a Lipschitz
    budget violation rather than a value to absorb.
    """
    if isinstance(m, Dual):
        raise ContractError("logdet has no forward-mode rule")
    mv = value_of(m)
    if mv.ndim < 2 or mv.shape[-1] != mv.shape[-2]:
        raise ShapeError(f"logdet expects square matrices, got {mv.shape}")
    ld = _slogdet_checked(mv)
    if not isinstance(m, Tensor):
        return ld

    def vjp(g):
        inv_t = np.swapaxes(np.linalg.inv(mv), -1, -2)
        if mv.ndim == 2:
            return (g * inv_t,)
        return (g[..., None, None] * inv_t,)

    return m.tape._record("logdet", (m,), ld, vjp, m.requires_grad)


# ---------------------------------------------------------------------------
# jacobian via forward-mode lifting


def jacobian(fn: Callable, x, max_dim: int = 16):
    """Exact Jacobian of an equal-dimension vector map, on the tape.

    ``fn`` must be built from lifted primitives and map (..., n) to
    (..., n).  All n basis seeds propagate in one sweep; the result has
    shape (..., n, n) with J[..., i, j] = d out_i / d x_j and remains
    differentiable with respect to any tape parameters ``fn`` uses.
    """
    xv = value_of(x)
    n = xv.shape[-1]
    if n > max_dim:
        raise ContractError(f"jacobian supports n <= {max_dim}, got {n}")
    eye = np.eye(n)
    seed_data = np.broadcast_to(eye, xv.shape[:-1] + (n, n)).copy()
    if isinstance(x, Tensor):
        seed = x.tape.constant(seed_data, op="jac_seed")
    else:
        seed = seed_data
    out = fn(Dual(x, seed))
    if not isinstance(out, Dual):
        raise ContractError("jacobian: fn must propagate the tangent")
    ov = value_of(out.value)
    if ov.shape != xv.shape:
        raise ShapeError(f"jacobian expects a square map, got {xv.shape} -> {ov.shape}")
    # tangent rows index seeds: tangent[..., j, i] = d out_i / d x_j
    return transpose(out.tangent)


def jacobian_with_value(fn: Callable, x, max_dim: int = 16):
    """Like :func:`jacobian` but also returns fn(x) from the same sweep."""
    xv = value_of(x)
    n = xv.shape[-1]
    if n > max_dim:
        raise ContractError(f"jacobian supports n <= {max_dim}, got {n}")
    eye = np.eye(n)
    seed_data = np.broadcast_to(eye, xv.shape[:-1] + (n, n)).copy()
    seed = x.tape.constant(seed_data, op="jac_seed") if isinstance(x, Tensor) else seed_data
    out = fn(Dual(x, seed))
    if not isinstance(out, Dual):
        raise ContractError("jacobian: fn must propagate the tangent")
    return out.value, transpose(out.tangent)


# names usable with finite-difference sweeps in tests
PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "add_scalar": add_scalar,
    "add_bias": add_bias, "rowscale": rowscale, "matmul": matmul,
    "transpose": transpose, "tanh": tanh, "sigmoid": sigmoid,
    "softplus": softplus, "exp": exp, "log": log, "sqrt": sqrt, "rsqrt": rsqrt,
    "sum": tsum, "sum_last": sum_last, "sqnorm": sqnorm, "trace": trace,
    "stack_last": stack_last, "logsumexp_last": logsumexp_last, "logdet": logdet,
}
