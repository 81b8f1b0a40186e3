"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything trainable in this package is built from the primitives here: a
Tensor wraps a numpy float64 buffer plus a lazily allocated gradient buffer,
and a Tape records every primitive application together with its backward
rule. Calling backward() on a scalar loss replays the tape in reverse and
accumulates gradients into every tensor that requires them.

Float64 is deliberate: the models are desk-scale and the test suite leans
heavily on central finite differences, which need the precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "name", "_grad")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if 0 in arr.shape:
            raise ShapeError(f"degenerate shape {arr.shape} for tensor {name or '<anon>'}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self) -> Array:
        # Allocated lazily; a tensor never reached by backward reads as zeros.
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate_grad(self, delta: Array) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += delta

    def item(self) -> float:
        if self.values.shape != ():
            raise ContractError(f"item() needs a scalar tensor, got shape {self.values.shape}")
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, so inputs of any entry always
    precede it (topological order by construction). A tape is single-use:
    backward() consumes it.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable[[Array], None]]] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable[[Array], None]) -> None:
        self.entries.append((out, tuple(inputs), rule))

    def __len__(self) -> int:
        return len(self.entries)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss."""
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    if loss.values.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    tape.consumed = True
    loss._grad = np.array(1.0)
    for out, _inputs, rule in reversed(tape.entries):
        g = out._grad
        if g is None:
            continue
        rule(g)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(kind: str, arr: Array) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kind} produced non-finite values")
    return arr


def _quiet():
    # Overflow inside an op surfaces as a NumericError via _finite, so
    # numpy's own warnings are just noise here.
    return np.errstate(over="ignore", invalid="ignore")


def _out(tape: Tape, kind: str, values: Array, inputs: tuple[Tensor, ...]) -> Tensor:
    return Tensor(_finite(kind, values), requires_grad=any(t.requires_grad for t in inputs))


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(tape: Tape, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with _quiet():
            values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.values.shape} and {b.values.shape} do not broadcast")
    out = _out(tape, "add", values, (a, b))

    def rule(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.values.shape))

    tape.record(out, (a, b), rule)
    return out


def mul(tape: Tape, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with _quiet():
            values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: shapes {a.values.shape} and {b.values.shape} do not broadcast")
    out = _out(tape, "mul", values, (a, b))

    def rule(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.values.shape))

    tape.record(out, (a, b), rule)
    return out


def matmul(tape: Tape, a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(
            f"matmul needs operands of rank >= 2, got {a.values.shape} and {b.values.shape}"
        )
    av = a.values.swapaxes(-1, -2) if transpose_a else a.values
    bv = b.values.swapaxes(-1, -2) if transpose_b else b.values
    try:
        with _quiet():
            values = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are incompatible")
    out = _out(tape, "matmul", values, (a, b))

    def rule(g: Array) -> None:
        if a.requires_grad:
            ga = g @ bv.swapaxes(-1, -2)
            if transpose_a:
                ga = ga.swapaxes(-1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = av.swapaxes(-1, -2) @ g
            if transpose_b:
                gb = gb.swapaxes(-1, -2)
            b.accumulate_grad(_unbroadcast(gb, b.values.shape))

    tape.record(out, (a, b), rule)
    return out


def concat(tape: Tape, *tensors, axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat needs at least one input")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.values.shape for p in parts]}")
    out = _out(tape, "concat", values, parts)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g: Array) -> None:
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            if part.requires_grad:
                part.accumulate_grad(piece)

    tape.record(out, parts, rule)
    return out


def slice_(tape: Tape, x, key) -> Tensor:
    """Basic (int/slice) indexing; the gradient scatters back into place."""
    x = _as_tensor(x)
    try:
        values = np.array(x.values[key])  # copy: output must not alias the input buffer
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}")
    out = _out(tape, "slice", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            if x._grad is None:
                x._grad = np.zeros_like(x.values)
            x._grad[key] += g

    tape.record(out, (x,), rule)
    return out


def tanh(tape: Tape, x) -> Tensor:
    x = _as_tensor(x)
    values = np.tanh(x.values)
    out = _out(tape, "tanh", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - values * values))

    tape.record(out, (x,), rule)
    return out


def sigmoid(tape: Tape, x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = _out(tape, "sigmoid", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * values * (1.0 - values))

    tape.record(out, (x,), rule)
    return out


def relu(tape: Tape, x) -> Tensor:
    x = _as_tensor(x)
    values = np.maximum(x.values, 0.0)
    out = _out(tape, "relu", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.values > 0))

    tape.record(out, (x,), rule)
    return out


def softmax(tape: Tape, x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)
    out = _out(tape, "softmax", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            inner = (g * values).sum(axis=axis, keepdims=True)
            x.accumulate_grad(values * (g - inner))

    tape.record(out, (x,), rule)
    return out


def log_softmax(tape: Tape, x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    values = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _out(tape, "log_softmax", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            soft = np.exp(values)
            x.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    tape.record(out, (x,), rule)
    return out


def logsumexp(tape: Tape, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    m = x.values.max(axis=axis, keepdims=True)
    ref = m + np.log(np.exp(x.values - m).sum(axis=axis, keepdims=True))
    if keepdims:
        values = ref
    elif axis is None:
        values = ref.reshape(())
    else:
        values = np.squeeze(ref, axis=axis)
    out = _out(tape, "logsumexp", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            weights = np.exp(x.values - ref)
            x.accumulate_grad(np.reshape(g, ref.shape) * weights)

    tape.record(out, (x,), rule)
    return out


def sum_(tape: Tape, x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    values = x.values.sum(axis=axis, keepdims=keepdims)
    out = _out(tape, "sum", values, (x,))
    kept = x.values.sum(axis=axis, keepdims=True).shape if axis is not None else None

    def rule(g: Array) -> None:
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.values.shape))
            else:
                x.accumulate_grad(np.broadcast_to(np.reshape(g, kept), x.values.shape))

    tape.record(out, (x,), rule)
    return out


def max_over_time(tape: Tape, x, mask) -> Tensor:
    """Columnwise max over the time axis (second-to-last), masked positions excluded."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.values.shape[:-1]:
        raise ShapeError(f"max_over_time: mask shape {mask.shape} vs input {x.values.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("max_over_time over a fully masked sequence")
    guarded = np.where(mask[..., None], x.values, -np.inf)
    values = guarded.max(axis=-2)
    idx = guarded.argmax(axis=-2)
    out = _out(tape, "max_over_time", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            scatter = np.zeros_like(x.values)
            np.put_along_axis(scatter, idx[..., None, :], g[..., None, :], axis=-2)
            x.accumulate_grad(scatter)

    tape.record(out, (x,), rule)
    return out


def dropout(tape: Tape, x, rate: float, train: bool) -> Tensor:
    """Inverted dropout: scaled by 1/keep at train time so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (tape.rng.random(x.values.shape) < keep) / keep
    out = _out(tape, "dropout", x.values * mask, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    tape.record(out, (x,), rule)
    return out


def layer_norm(tape: Tape, x, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    x = _as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    values = centered * inv
    out = _out(tape, "layer_norm", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * values).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (g - gm - values * gy))

    tape.record(out, (x,), rule)
    return out


def embedding_lookup(tape: Tape, table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.values.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    out = _out(tape, "embedding_lookup", table.values[ids], (table,))

    def rule(g: Array) -> None:
        if table.requires_grad:
            if table._grad is None:
                table._grad = np.zeros_like(table.values)
            np.add.at(table._grad, ids, g)

    tape.record(out, (table,), rule)
    return out


def clip(tape: Tape, x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside the range."""
    x = _as_tensor(x)
    values = np.clip(x.values, lo, hi)
    out = _out(tape, "clip", values, (x,))
    passthrough = (x.values > lo) & (x.values < hi)

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * passthrough)

    tape.record(out, (x,), rule)
    return out


def reshape(tape: Tape, x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        values = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.values.shape} as {shape}")
    out = _out(tape, "reshape", values, (x,))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.values.shape))

    tape.record(out, (x,), rule)
    return out


def transpose(tape: Tape, x, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    values = np.ascontiguousarray(x.values.transpose(axes))
    out = _out(tape, "transpose", values, (x,))
    inverse = tuple(np.argsort(axes))

    def rule(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inverse))

    tape.record(out, (x,), rule)
    return out


def take_time(tape: Tape, x, idx) -> Tensor:
    """Gather along the time axis of a [batch, time, dim] tensor: out[b, t] = x[b, idx[b, t]]."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.values.ndim != 3 or idx.shape != x.values.shape[:2]:
        raise ShapeError(f"take_time: index shape {idx.shape} vs input {x.values.shape}")
    values = np.take_along_axis(x.values, idx[:, :, None], axis=1)
    out = _out(tape, "take_time", values, (x,))
    batch_idx = np.arange(x.values.shape[0])[:, None]

    def rule(g: Array) -> None:
        if x.requires_grad:
            if x._grad is None:
                x._grad = np.zeros_like(x.values)
            np.add.at(x._grad, (batch_idx, idx), g)

    tape.record(out, (x,), rule)
    return out


# Dispatch table for the generic entry point. The first fifteen kinds are the
# documented primitive set; the rest are movement/reduction helpers the model
# code uses to stay vectorized over batches.
_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": slice_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "max_over_time": max_over_time,
    "dropout": dropout,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "sum": sum_,
    "clip": clip,
    "reshape": reshape,
    "transpose": transpose,
    "take_time": take_time,
}


def forward_primitive(tape: Tape, kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply a primitive by name, recording it on the tape."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive kind {kind!r}")
    return fn(tape, *inputs, **(attrs or {}))


def check_gradients(f: Callable[[Tape, Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
                    seed: int = 0) -> float:
    """Compare analytic gradients of f against central finite differences.

    f must build its computation on the tape it is given and return a scalar
    tensor; it is re-evaluated at coordinate-wise perturbations of x, each
    time on a fresh tape with the same seed so stochastic ops are frozen.
    Returns the max over coordinates of |analytic - fd| / max(1, |analytic|).
    """
    probe = Tensor(x.values.copy(), requires_grad=True)
    tape = Tape(seed)
    loss = f(tape, probe)
    if loss.values.shape != ():
        raise ContractError("check_gradients needs a scalar-valued function")
    backward(tape, loss)
    analytic = probe.grad.copy()

    base = x.values.copy()
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped.flat[i] += epsilon
        hi = f(Tape(seed), Tensor(bumped)).values
        bumped = base.copy()
        bumped.flat[i] -= epsilon
        lo = f(Tape(seed), Tensor(bumped)).values
        fd = (float(hi) - float(lo)) / (2.0 * epsilon)
        a = float(analytic.flat[i])
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return float(worst)
