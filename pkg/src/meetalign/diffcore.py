"""Reverse-mode differentiation over float64 numpy arrays.

Every primitive computes its value eagerly and, when at least one input
depends on a trainable parameter and a :class:`Tape` is active, appends a
node holding the adjoint rule.  :func:`backward` replays the tape in
reverse.  Inputs that do not depend on trainable parameters are treated as
constants, so frozen weights never receive gradient work.

Also here: a counter-based seeded RNG and a central finite-difference
gradient oracle used by the test-suite.
"""

from __future__ import annotations

import hashlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
MASK_FILL = -1e9

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable float64 value; ``requires_grad`` marks dependence on a trainable parameter."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named, mutable leaf.  Optimizers rebind ``data``; ``trainable`` gates gradient flow."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.  Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(value, requires_grad=tape is not None)
    if tape is not None:
        tape.nodes.append(_Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        # (..., k) @ (k, n) as one 2-D product
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", (a, b), a.data + b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", (a, b), a.data * b.data, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take_rows(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), a.data[index], vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", (table,), table.data[ids], vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _emit("gelu", (x,), out, vjp)


def _check_axis(op: str, x: Tensor) -> None:
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"{op}: empty last axis in shape {x.shape}")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_axis("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    _check_axis("log_softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, vjp)


def gather(x: Tensor, index) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis; result drops that axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {index.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit("gather", (x,), picked, vjp)


def concatenate(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concatenate: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concatenate: shapes {[p.shape for p in parts]} along axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _emit("concatenate", parts, out, vjp)


def causal_mask_fill(scores: Tensor) -> Tensor:
    """Fill entries above the diagonal of the trailing (T, T) block with ``MASK_FILL``."""
    if scores.data.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeError(f"causal_mask_fill: trailing block must be square, got {scores.shape}")
    t = scores.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    out = np.where(future, MASK_FILL, scores.data)
    return _emit("causal_mask_fill", (scores,), out, lambda g: (np.where(future, 0.0, g),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "sum": total,
    "reshape": reshape,
    "transpose": transpose,
    "slice": take_rows,
    "embedding": embedding,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "gather": gather,
    "concatenate": concatenate,
    "causal_mask_fill": causal_mask_fill,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each parameter in ``params``.

    Parameters that never reached the tape get an exact zero array.
    """
    if loss.data.shape not in ((), (1,)):
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        adj[id(loss)] = np.ones(loss.shape)
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    grads = {}
    for p in params:
        g = adj.get(id(p))
        grads[p.name] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return grads


def value_and_grad(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        loss = loss_fn()
    return loss.item(), backward(tape, loss, params)


class NonFiniteGradient(ArithmeticError):
    def __init__(self, flagged: list[tuple[str, int]]):
        super().__init__(f"non-finite loss at perturbed coordinates: {flagged[:5]}")
        self.flagged = flagged


def finite_diff_gradient(loss_fn: Callable[[], float], params: Sequence[Parameter],
                         step: float = 1e-5, coords: Mapping[str, Sequence[int]] | None = None
                         ) -> dict[str, np.ndarray]:
    """Central-difference estimate of the gradient of ``loss_fn()``.

    ``coords`` optionally restricts which flat indices are probed per
    parameter; the rest of that gradient is left as NaN.  Any coordinate
    whose perturbed loss is non-finite raises :class:`NonFiniteGradient`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads, flagged = {}, []
    for p in params:
        g = np.full(p.shape, np.nan) if coords and p.name in coords else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        idx = coords[p.name] if coords and p.name in coords else range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                flagged.append((p.name, int(i)))
                continue
            g.reshape(-1)[i] = (up - down) / (2.0 * step)
        grads[p.name] = g
    if flagged:
        raise NonFiniteGradient(flagged)
    return grads


# ----------------------------------------------------------------------- rng


def _stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name & 0xFFFFFFFFFFFFFFFF
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class SeededRng:
    """Counter-based generator: Philox keyed by ``(seed, stream)``.

    Uniforms are built from the raw 64-bit stream (53 high bits) and
    Gaussians by Box-Muller, so draws depend only on the integer stream.
    """

    def __init__(self, seed: int, stream: str | int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        self._bits = np.random.Philox(key=np.array([self.seed, _stream_key(stream)], dtype=np.uint64))
        self._spare: float | None = None

    def fork(self, stream: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.stream}/{stream}")

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int | None = None):
        """Uniform on [0, 1)."""
        m = 1 if n is None else n
        u = (self.raw(m) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if n is None else u

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (z * std).reshape(shape)

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform integers on [low, high) by rejection, so no modulo bias."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        m = 1 if n is None else n
        limit = (2 ** 64 // span) * span
        out = []
        while len(out) < m:
            for r in self.raw(m - len(out)).tolist():
                if r < limit:
                    out.append(low + r % span)
        return out[0] if n is None else np.array(out, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF draw from a probability vector."""
        cdf = np.cumsum(probs)
        u = self.uniform() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))
