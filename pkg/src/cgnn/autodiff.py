"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive application is recorded on the active :class:`Tape` when at
least one operand requires gradients. :func:`backpropagate` walks the tape in
reverse and returns a gradient for each requested leaf.

Shapes are explicit: the only broadcasting is multiplication by a Python
scalar (:func:`scale`). Bias terms are expressed as ``ones @ b`` so that the
backward rules stay within matmul.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operands do not conform to a primitive's shape rule."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; every operator maps to exactly one primitive
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


@dataclass
class TapeEntry:
    kind: str
    operands: tuple[Tensor, ...]
    output: Tensor
    params: dict = field(default_factory=dict)
    cache: object = None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes stack per thread and only the
    innermost one records.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self) -> list[np.ndarray]:
        """Re-run every entry forward from the leaves and return the outputs."""
        values: dict[int, np.ndarray] = {}
        out = []
        for entry in self.entries:
            args = [values.get(id(t), t.data) for t in entry.operands]
            res, _ = PRIMITIVES[entry.kind].forward(args, entry.params)
            values[id(entry.output)] = res
            out.append(res)
        return out


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


# --------------------------------------------------------------------------
# primitive table


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (arrays, params) -> (result, cache)
    backward: Callable  # (grad_out, arrays, result, params, cache) -> list of grads


PRIMITIVES: dict[str, Primitive] = {}


def _register(kind: str, forward, backward):
    PRIMITIVES[kind] = Primitive(forward, backward)


def _fmt(shapes) -> str:
    return " and ".join(str(tuple(s)) for s in shapes)


def _check_same(kind: str, arrays):
    if arrays[0].shape != arrays[1].shape:
        raise ShapeError(f"{kind}: shape mismatch {_fmt(a.shape for a in arrays)}")


def _matmul_fwd(arrays, params):
    a, b = arrays
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {_fmt([a.shape, b.shape])}")
    return a @ b, None


def _matmul_bwd(g, arrays, out, params, cache):
    a, b = arrays
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    b2 = b.reshape(-1, 1) if b.ndim == 1 else b
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    return [(g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)]


def _add_fwd(arrays, params):
    _check_same("add", arrays)
    return arrays[0] + arrays[1], None


def _hadamard_fwd(arrays, params):
    _check_same("hadamard", arrays)
    return arrays[0] * arrays[1], None


def _scale_fwd(arrays, params):
    return arrays[0] * arrays[0].dtype.type(params["factor"]), None


def _concat_fwd(arrays, params):
    lead = {a.shape[:-1] for a in arrays}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading dimensions differ for {_fmt(a.shape for a in arrays)}")
    return np.concatenate(arrays, axis=-1), None


def _concat_bwd(g, arrays, out, params, cache):
    grads, start = [], 0
    for a in arrays:
        stop = start + a.shape[-1]
        grads.append(g[..., start:stop])
        start = stop
    return grads


def _slice_fwd(arrays, params):
    a = arrays[0]
    start, stop = params["start"], params["stop"]
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {a.shape}")
    return a[..., start:stop], None


def _slice_bwd(g, arrays, out, params, cache):
    full = np.zeros_like(arrays[0])
    full[..., params["start"]:params["stop"]] = g
    return [full]


def _sigmoid_fwd(arrays, params):
    x = arrays[0]
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1), None


def _softmax_fwd(arrays, params):
    x = arrays[0]
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, arrays, out, params, cache):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_fwd(arrays, params):
    x = arrays[0]
    if np.any(x <= 0):
        raise NumericError("log: non-positive input")
    return np.log(x), None


def _reduce_fwd(op):
    def fwd(arrays, params):
        axis = params.get("axis")
        a = arrays[0]
        res = a.sum(axis=axis) if op == "sum" else a.mean(axis=axis)
        return np.asarray(res, dtype=a.dtype), None

    return fwd


def _reduce_bwd(op):
    def bwd(g, arrays, out, params, cache):
        a = arrays[0]
        axis = params.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        grad = np.broadcast_to(g, a.shape).astype(a.dtype)
        if op == "mean":
            n = a.size if axis is None else a.shape[axis]
            grad = grad / a.dtype.type(n)
        return [grad]

    return bwd


def _clip_fwd(arrays, params):
    return np.clip(arrays[0], params["low"], params["high"]), None


def _clip_bwd(g, arrays, out, params, cache):
    a = arrays[0]
    return [g * ((a >= params["low"]) & (a <= params["high"]))]


_register("matmul", _matmul_fwd, _matmul_bwd)
_register("add", _add_fwd, lambda g, arrs, out, p, c: [g, g])
_register("hadamard", _hadamard_fwd, lambda g, arrs, out, p, c: [g * arrs[1], g * arrs[0]])
_register("scale", _scale_fwd, lambda g, arrs, out, p, c: [g * arrs[0].dtype.type(p["factor"])])
_register("concat", _concat_fwd, _concat_bwd)
_register("slice", _slice_fwd, _slice_bwd)
_register("sigmoid", _sigmoid_fwd, lambda g, arrs, out, p, c: [g * out * (1 - out)])
_register("tanh", lambda arrs, p: (np.tanh(arrs[0]), None), lambda g, arrs, out, p, c: [g * (1 - out * out)])
_register("softmax", _softmax_fwd, _softmax_bwd)
_register("log", _log_fwd, lambda g, arrs, out, p, c: [g / arrs[0]])
_register("sum", _reduce_fwd("sum"), _reduce_bwd("sum"))
_register("mean", _reduce_fwd("mean"), _reduce_bwd("mean"))
_register("clip", _clip_fwd, _clip_bwd)


# primitives whose domain errors are expected and reported as NumericError
# rather than as numpy warnings; the rest skip the errstate cost
_GUARDED = frozenset({"log", "scale"})


def primitive_apply(kind: str, operands: Sequence[Tensor], **params) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the active tape if needed."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    operands = tuple(operands)
    arrays = [t.data for t in operands]
    if len({a.dtype for a in arrays}) > 1:
        raise TypeError(f"{kind}: mixed dtypes {[str(a.dtype) for a in arrays]}")
    if kind in _GUARDED:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            result, cache = prim.forward(arrays, params)
    else:
        result, cache = prim.forward(arrays, params)
    if not np.isfinite(result).all():
        raise NumericError(f"{kind}: non-finite output")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in operands)
    out = Tensor(result, requires_grad=needs)
    if needs:
        tape.entries.append(TapeEntry(kind, operands, out, params, cache))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_apply("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_apply("add", (a, b))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    return primitive_apply("hadamard", (a, b))


def scale(a: Tensor, factor: float) -> Tensor:
    return primitive_apply("scale", (a,), factor=factor)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return primitive_apply("concat", tensors)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return primitive_apply("slice", (a,), start=start, stop=stop)


def sigmoid(a: Tensor) -> Tensor:
    return primitive_apply("sigmoid", (a,))


def tanh(a: Tensor) -> Tensor:
    return primitive_apply("tanh", (a,))


def softmax(a: Tensor) -> Tensor:
    return primitive_apply("softmax", (a,))


def log(a: Tensor) -> Tensor:
    return primitive_apply("log", (a,))


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    return primitive_apply("sum", (a,), axis=axis)


def mean_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    return primitive_apply("mean", (a,), axis=axis)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    return primitive_apply("clip", (a,), low=low, high=high)


# --------------------------------------------------------------------------
# reverse pass


def backpropagate(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaves on ``tape``.

    Returns a mapping keyed by leaf name (or ``id`` for unnamed leaves). When
    ``wrt`` is given, exactly those leaves are reported, with zeros for any
    not reachable from ``loss``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backpropagate: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        arrays = [t.data for t in entry.operands]
        parts = PRIMITIVES[entry.kind].backward(g, arrays, entry.output.data, entry.params, entry.cache)
        for t, part in zip(entry.operands, parts):
            if not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = part if prev is None else prev + part
    if wrt is None:
        targets = list(leaves.values())
        if id(loss) not in produced and loss.requires_grad:
            targets.append(loss)
    else:
        targets = list(wrt)
    result = {}
    for t in targets:
        g = grads.get(id(t))
        result[t.name if t.name is not None else str(id(t))] = (
            np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        )
    return result


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    point: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``point``.

    Arrays in ``point`` are perturbed in place and restored afterwards, so
    ``f`` may read them either from its argument or from shared state.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for name, arr in point.items():
        grad = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: array must be contiguous for in-place perturbation")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(point))
            flat[i] = orig - epsilon
            fm = float(f(point))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"{name}[{i}]: non-finite evaluation")
            grad.reshape(-1)[i] = (fp - fm) / (2 * epsilon)
        out[name] = grad
    return out


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))
