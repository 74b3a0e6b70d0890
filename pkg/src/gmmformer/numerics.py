"""Dense float64 tensors with a recorded trace and reverse-mode gradients.

Every differentiable operation in the model goes through
:func:`apply_primitive`.  When a :class:`Tape` is active, each application is
appended to it; :func:`backpropagate` walks the tape backwards and pushes
vector-Jacobian products to the leaves.  Outside a tape the primitives still
evaluate, they just leave no trace (inference mode).

Shapes follow numpy broadcasting; all reductions, softmax and layer norm act
on the last axis unless told otherwise.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Incompatible input shapes for a primitive."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...], detail: str = ""):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {joined}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """A float64 array plus a flag saying whether gradients should reach it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [other, self])

    def __neg__(self):
        return apply_primitive("scale", [self], c=-1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return apply_primitive("scale", [self], c=1.0 / float(other))

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    @property
    def T(self):
        return apply_primitive("transpose", [self])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# trace


@dataclass
class Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any]
    ctx: Any = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives applied inside the ``with`` block are
    appended in execution order.  Tapes are confined to the thread (context)
    that opened them.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        """Tensors consumed by the trace but not produced by it, first-seen order."""
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def replay(self, overrides: Mapping[Tensor, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-evaluate the trace, optionally substituting leaf values.

        Returns a map from ``id(tensor)`` to the recomputed value for every
        node output.  Recorded tensors are left untouched.
        """
        values: dict[int, np.ndarray] = {}
        if overrides:
            for t, v in overrides.items():
                values[id(t)] = np.asarray(v, dtype=np.float64)
        for n in self.nodes:
            args = [values.get(id(t), t.data) for t in n.inputs]
            out, _ = PRIMITIVES[n.primitive].forward(*args, **n.attrs)
            values[id(n.output)] = out
        return values


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("gmmformer_tape", default=None)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[..., Sequence[np.ndarray | None]]
    check: Callable[..., None] | None = None
    variadic: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp, check=None, variadic=False):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check, variadic)


def apply_primitive(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``name`` on ``inputs`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    if prim.check is not None:
        prim.check(name, *arrays, **attrs)
    out, ctx = prim.forward(*arrays, **attrs)
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=np.float64)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = any(t.requires_grad for t in tensors)
    result.grad = None
    result.name = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.nodes.append(Node(name, tensors, result, attrs, ctx))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, *arrays, **_):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(name, *(a.shape for a in arrays)) from None


# elementwise ------------------------------------------------------------------

_register(
    "add",
    lambda a, b: (a + b, None),
    lambda g, ctx, out, needs, a, b: (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    ),
    _check_broadcast,
)
_register(
    "sub",
    lambda a, b: (a - b, None),
    lambda g, ctx, out, needs, a, b: (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    ),
    _check_broadcast,
)
_register(
    "mul",
    lambda a, b: (a * b, None),
    lambda g, ctx, out, needs, a, b: (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ),
    _check_broadcast,
)
_register(
    "scale",
    lambda a, c: (a * c, None),
    lambda g, ctx, out, needs, a, c: (g * c,),
)
_register(
    "exp",
    lambda a: (np.exp(a), None),
    lambda g, ctx, out, needs, a: (g * out,),
)


def _log_fwd(a):
    if np.any(a <= 0):
        raise ValueError("log: non-positive input")
    return np.log(a), None


_register("log", _log_fwd, lambda g, ctx, out, needs, a: (g / a,))


def _maximum_vjp(g, ctx, out, needs, a, b):
    # ties go to the first argument
    first = a >= b
    return _unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)


_register("maximum", lambda a, b: (np.maximum(a, b), None), _maximum_vjp, _check_broadcast)
_register(
    "relu",
    lambda a: (np.maximum(a, 0.0), None),
    lambda g, ctx, out, needs, a: (np.where(a > 0, g, 0.0),),
)


def _softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_register(
    "softplus",
    lambda a: (_softplus(a), None),
    lambda g, ctx, out, needs, a: (g * _sigmoid(a),),
)

# linear algebra ---------------------------------------------------------------


def _check_matmul(name, a, b, **_):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(name, a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(name, a.shape, b.shape, detail="batch dimensions differ") from None


def _matmul_fwd(a, b):
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM instead of a stack of small ones
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1]), None
    return a @ b, None


def _matmul_vjp(g, ctx, out, needs, a, b):
    ga = gb = None
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        if needs[0]:
            ga = (g2 @ b.T).reshape(a.shape)
        if needs[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if needs[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if needs[1]:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_vjp, _check_matmul)


def _transpose_fwd(a, axes=None):
    if axes is None:
        return np.swapaxes(a, -1, -2), None
    return np.transpose(a, axes), None


def _transpose_vjp(g, ctx, out, needs, a, axes=None):
    if axes is None:
        return (np.swapaxes(g, -1, -2),)
    return (np.transpose(g, np.argsort(axes)),)


def _check_transpose(name, a, axes=None):
    if axes is None and a.ndim < 2:
        raise ShapeError(name, a.shape, detail="need at least 2 dimensions")
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(name, a.shape, detail=f"bad axes {axes}")


_register("transpose", _transpose_fwd, _transpose_vjp, _check_transpose)


def _check_reshape(name, a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(name, a.shape, tuple(shape))


_register(
    "reshape",
    lambda a, shape: (a.reshape(shape), None),
    lambda g, ctx, out, needs, a, shape: (g.reshape(a.shape),),
    _check_reshape,
)

# reductions -------------------------------------------------------------------

_register(
    "sum",
    lambda a, axis=None, keepdims=False: (np.sum(a, axis=axis, keepdims=keepdims), None),
    lambda g, ctx, out, needs, a, axis=None, keepdims=False: (
        np.broadcast_to(g if keepdims or axis is None else np.expand_dims(g, axis), a.shape).copy(),
    ),
)


def _mean_vjp(g, ctx, out, needs, a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    g = g if keepdims or axis is None else np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


_register(
    "mean",
    lambda a, axis=-1, keepdims=False: (np.mean(a, axis=axis, keepdims=keepdims), None),
    _mean_vjp,
)


def _reduce_max_fwd(a, axis=-1):
    idx = np.argmax(a, axis=axis)  # first occurrence on ties
    return np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis).squeeze(axis), idx


def _reduce_max_vjp(g, idx, out, needs, a, axis=-1):
    ga = np.zeros_like(a)
    np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (ga,)


def _check_nonempty_axis(name, a, axis=-1, **_):
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(name, a.shape, detail="empty reduction axis")


_register("reduce_max", _reduce_max_fwd, _reduce_max_vjp, _check_nonempty_axis)

# normalisation ----------------------------------------------------------------


def _softmax_fwd(a, mask=None):
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    z = a - np.max(a, axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=-1, keepdims=True)
    return z, None


def _softmax_vjp(g, ctx, y, needs, a, mask=None):
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _check_softmax(name, a, mask=None):
    _check_nonempty_axis(name, a)
    if mask is not None:
        try:
            shape = np.broadcast_shapes(a.shape, np.shape(mask))
        except ValueError:
            raise ShapeError(name, a.shape, np.shape(mask), detail="mask") from None
        if shape != a.shape:
            raise ShapeError(name, a.shape, np.shape(mask), detail="mask must broadcast to input")
        if not np.all(np.any(np.broadcast_to(mask, a.shape), axis=-1)):
            raise ValueError(f"{name}: a row is fully masked")


_register("softmax", _softmax_fwd, _softmax_vjp, _check_softmax)


def _layer_norm_fwd(a, eps=LAYER_NORM_EPS):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat, inv


def _layer_norm_vjp(g, inv, xhat, needs, a, eps=LAYER_NORM_EPS):
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - xhat * gx),)


_register("layer_norm", _layer_norm_fwd, _layer_norm_vjp, _check_nonempty_axis)

# structure --------------------------------------------------------------------


def _check_concat(name, *arrays, axis=-1):
    if not arrays:
        raise ShapeError(name, detail="no inputs")
    ref = list(arrays[0].shape)
    ax = axis % len(ref)
    for a in arrays[1:]:
        s = list(a.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(name, arrays[0].shape, a.shape)


def _concat_vjp(g, sizes, out, needs, *arrays, axis=-1):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


_register(
    "concat",
    lambda *arrays, axis=-1: (np.concatenate(arrays, axis=axis), [a.shape[axis] for a in arrays]),
    _concat_vjp,
    _check_concat,
    variadic=True,
)


def _take_vjp(g, ctx, out, needs, a, indices, axis=0):
    ga = np.zeros_like(a)
    moved = np.moveaxis(ga, axis, 0)
    np.add.at(moved, np.asarray(indices), np.moveaxis(g, axis, 0) if np.ndim(indices) else g)
    return (ga,)


def _check_take(name, a, indices, axis=0):
    idx = np.asarray(indices)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(name, a.shape, idx.shape, detail="index out of range")


_register(
    "take",
    lambda a, indices, axis=0: (np.take(a, indices, axis=axis), None),
    _take_vjp,
    _check_take,
)


def _cosine_fwd(a, b):
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine: zero-norm vector")
    an = a / na
    bn = b / nb
    return an @ np.swapaxes(bn, -1, -2), (an, bn, na, nb)


def _cosine_vjp(g, ctx, out, needs, a, b):
    an, bn, na, nb = ctx
    gan = g @ bn
    gbn = np.swapaxes(g, -1, -2) @ an
    ga = (gan - an * np.sum(gan * an, axis=-1, keepdims=True)) / na
    gb = (gbn - bn * np.sum(gbn * bn, axis=-1, keepdims=True)) / nb
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _check_cosine(name, a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(name, a.shape, b.shape, detail="feature dimensions differ")


_register("cosine", _cosine_fwd, _cosine_vjp, _check_cosine)


# ---------------------------------------------------------------------------
# functional helpers


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [a], axes=None if axes is None else tuple(axes))


def reshape(a, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def exp(a) -> Tensor:
    return apply_primitive("exp", [a])


def log(a) -> Tensor:
    return apply_primitive("log", [a])


def maximum(a, b) -> Tensor:
    return apply_primitive("maximum", [a, b])


def relu(a) -> Tensor:
    return apply_primitive("relu", [a])


def softplus(a) -> Tensor:
    return apply_primitive("softplus", [a])


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get zero weight."""
    return apply_primitive("softmax", [a], mask=mask)


def layer_norm(a) -> Tensor:
    """Zero-mean unit-variance rows (no affine part)."""
    return apply_primitive("layer_norm", [a])


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def reduce_max(a, axis: int = -1) -> Tensor:
    return apply_primitive("reduce_max", [a], axis=axis)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def take(a, indices, axis: int = 0) -> Tensor:
    return apply_primitive("take", [a], indices=np.asarray(indices), axis=axis)


def cosine(a, b) -> Tensor:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    return apply_primitive("cosine", [a, b])


# ---------------------------------------------------------------------------
# gradients


def backpropagate(
    output: Tensor, record: Tape, wrt: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``output`` over ``record``.

    Returns a gradient for every ``requires_grad`` leaf of the record (plus
    anything listed in ``wrt``).  Leaves the output does not depend on get an
    all-zero gradient.
    """
    if output.data.size != 1:
        raise ValueError(f"backpropagate needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None or not node.output.requires_grad:
            continue
        prim = PRIMITIVES[node.primitive]
        arrays = [t.data for t in node.inputs]
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = prim.vjp(g, node.ctx, node.output.data, needs, *arrays, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    targets = [t for t in record.leaves() if t.requires_grad]
    if wrt is not None:
        known = {id(t) for t in targets}
        targets += [t for t in wrt if id(t) not in known]
    out: dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else g
    return out


class Parameters(dict):
    """Trainable tensors keyed by stable dotted paths (insertion ordered)."""

    def add(self, path: str, value) -> Tensor:
        if path in self:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(value, requires_grad=True, name=path)
        self[path] = t
        return t

    def num_values(self) -> int:
        return sum(t.data.size for t in self.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        missing = set(self) - set(values)
        extra = set(values) - set(self)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError("load", t.shape, v.shape, detail=k)
            t.data = v.copy()

    @classmethod
    def from_arrays(cls, values: Mapping[str, np.ndarray]) -> "Parameters":
        p = cls()
        for k, v in values.items():
            p.add(k, v)
        return p


def value_and_grad(f: Callable[[], Tensor], params: Mapping[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Run ``f`` under a fresh tape and return its value and per-path gradients."""
    with Tape() as tape:
        out = f()
    grads = backpropagate(out, tape, wrt=params.values())
    return float(out.data), {k: grads[t] for k, t in params.items()}


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_coords: int | None = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between backprop and central differences.

    ``f`` takes no arguments and reads the current parameter values, so the
    check perturbs ``params`` in place (and restores them).  At most
    ``max_coords`` coordinates are sampled per parameter tensor; ``None``
    checks every coordinate.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    rng = rng if rng is not None else np.random.default_rng(0)
    value, analytic = value_and_grad(f, params)
    if not np.isfinite(value):
        raise ValueError(f"non-finite function value {value}")

    def evaluate() -> float:
        v = float(f().data)
        if not np.isfinite(v):
            raise ValueError(f"non-finite function value {v}")
        return v

    worst = 0.0
    for path, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        g = analytic[path].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            err = abs(g[i] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
