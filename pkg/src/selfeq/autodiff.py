"""Dense float32 tensors with taped reverse-mode differentiation.

Values are stored as float32; matmul inner products and reductions
accumulate in float64 before casting back, which keeps finite-difference
gradient checks tight. There is no implicit broadcasting: apart from
scalar-times-tensor, every shape mix goes through an explicit expand op.

The tape is define-by-run and rebuilt per training step. A tape and the
tensors recorded on it are confined to one thread; independent tapes may
run in parallel on disjoint data.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

CHECK_FINITE = os.environ.get("SELFEQ_CHECKS", "1") != "0"


class ShapeError(ValueError):
    """Operands do not conform to an op's shape rule."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (e.g. log of x <= 0)."""


_ACTIVE_TAPE: "Tape | None" = None


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of ops; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, int] = {}  # id(tensor) -> node id

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("another tape is already active on this thread")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, op: str, parents: tuple[int, ...], backward) -> int:
        self.nodes.append(_Node(op, parents, backward))
        return len(self.nodes) - 1

    def gradients(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root; returns grads keyed by node id.

        Pure: does not touch `self.grads`, so it can be called mid-build
        (e.g. to read an intermediate gradient that then re-enters the
        graph as a constant) without disturbing the final backward.
        """
        if root._tape is not self or root._node_id is None:
            raise ValueError("root tensor is not recorded on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar-shaped, got {root.shape}")
        grads: dict[int, np.ndarray] = {
            root._node_id: np.ones_like(root.data)
        }
        for nid in range(root._node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for pid, pg in node.backward(g):
                if pid is None:
                    continue
                acc = grads.get(pid)
                # out-of-place: bwd closures may alias one array to several
                # parents (e.g. add), so never mutate a stored buffer
                grads[pid] = pg if acc is None else acc + pg
        return grads

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Run the reverse sweep and keep the buffers on the tape."""
        self.grads = self.gradients(root)
        return self.grads

    def grad(self, t: "Tensor") -> np.ndarray | None:
        """Gradient buffer for `t` from the last backward(), if any."""
        if t._tape is not self or t._node_id is None:
            return None
        return self.grads.get(t._node_id)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _leaf_id(self, tape: Tape) -> int | None:
        """Node id of this tensor on `tape`, registering a leaf if needed."""
        if self._tape is tape and self._node_id is not None:
            return self._node_id
        if not self.requires_grad:
            return None
        nid = tape._leaves.get(id(self))
        if nid is None:
            nid = tape._record("leaf", (), None)
            tape._leaves[id(self)] = nid
        self._tape = tape
        self._node_id = nid
        return nid

    # operator sugar (same-shape elementwise, scalar mul)
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _check_finite(op: str, out: np.ndarray):
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_builder):
    """Record `out` on the active tape if any input participates in grad.

    `backward_builder(parent_ids)` must return the backward closure.
    """
    _check_finite(op, out)
    t = Tensor(out)
    tape = _ACTIVE_TAPE
    if tape is None:
        return t
    pids = tuple(x._leaf_id(tape) for x in inputs)
    if all(p is None for p in pids):
        return t
    t.requires_grad = True
    t._tape = tape
    t._node_id = tape._record(op, pids, backward_builder(pids))
    return t


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = a.data + b.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g), (pids[1], g))
        return bwd

    return _make("add", out, (a, b), build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = a.data - b.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g), (pids[1], -g))
        return bwd

    return _make("sub", out, (a, b), build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g * bd), (pids[1], g * ad))
        return bwd

    return _make("mul", out, (a, b), build)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g / bd), (pids[1], -g * ad / (bd * bd)))
        return bwd

    return _make("div", out, (a, b), build)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    out = a.data * np.float32(c)

    def build(pids):
        def bwd(g):
            return ((pids[0], g * np.float32(c)),)
        return bwd

    return _make("scalar_mul", out, (a,), build)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + np.float32(c)

    def build(pids):
        def bwd(g):
            return ((pids[0], g),)
        return bwd

    return _make("add_scalar", out, (a,), build)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = (a.data > 0).astype(np.float32)

    def build(pids):
        def bwd(g):
            return ((pids[0], g * mask),)
        return bwd

    return _make("relu", out, (a,), build)


def clamp_min(a: Tensor, c: float) -> Tensor:
    out = np.maximum(a.data, np.float32(c))
    mask = (a.data > c).astype(np.float32)

    def build(pids):
        def bwd(g):
            return ((pids[0], g * mask),)
        return bwd

    return _make("clamp_min", out, (a,), build)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def build(pids):
        def bwd(g):
            return ((pids[0], g * out),)
        return bwd

    return _make("exp", out, (a,), build)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    out = np.log(a.data)
    ad = a.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g / ad),)
        return bwd

    return _make("log", out, (a,), build)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    ad = a.data

    def build(pids):
        def bwd(g):
            return ((pids[0], g * 2.0 * ad),)
        return bwd

    return _make("square", out, (a,), build)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: input has negative entries")
    out = np.sqrt(a.data)
    # Clamped denominator: at an exact zero the incoming variance gradient
    # is itself zero, so the subgradient 0 is produced instead of inf.
    denom = np.maximum(2.0 * out, np.float32(1e-12))

    def build(pids):
        def bwd(g):
            return ((pids[0], g / denom),)
        return bwd

    return _make("sqrt", out, (a,), build)


def detach(a: Tensor) -> Tensor:
    """Copy values and sever gradient flow."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    src_shape = a.data.shape

    def build(pids):
        def bwd(g):
            return ((pids[0], g.reshape(src_shape)),)
        return bwd

    return _make("reshape", out, (a,), build)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def build(pids):
        def bwd(g):
            return ((pids[0], np.ascontiguousarray(g.transpose(inv))),)
        return bwd

    return _make("transpose", out, (a,), build)


def expand_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of `a` to `shape` (numpy broadcasting rules)."""
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"expand_to: cannot expand {a.shape} to {shape}") from e
    src_shape = a.data.shape
    # axes along which the source was replicated
    padded = (1,) * (len(shape) - len(src_shape)) + src_shape
    summed_axes = tuple(i for i, (s, d) in enumerate(zip(padded, shape)) if s == 1 and d != 1)

    def build(pids):
        def bwd(g):
            r = g.astype(np.float64).sum(axis=summed_axes, keepdims=True) if summed_axes else g.astype(np.float64)
            return ((pids[0], r.reshape(src_shape).astype(np.float32)),)
        return bwd

    return _make("expand_to", out, (a,), build)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(pids):
        def bwd(g):
            outs = []
            for i, pid in enumerate(pids):
                if pid is None:
                    continue
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                outs.append((pid, np.ascontiguousarray(g[tuple(sl)])))
            return outs
        return bwd

    return _make("concat", out, tuple(tensors), build)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Axis-0 lookup: out[i] = table[ids[i]] (embedding lookup)."""
    idx = np.asarray(ids)
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    out = table.data[idx]
    tshape = table.data.shape

    def build(pids):
        def bwd(g):
            acc = np.zeros(tshape, dtype=np.float32)
            np.add.at(acc, idx, g)
            return ((pids[0], acc),)
        return bwd

    return _make("gather_rows", out, (table,), build)


# ---------------------------------------------------------------------------
# contractions and reductions (float64 accumulation)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(np.float32)

    def build(pids):
        def bwd(g):
            g64 = g.astype(np.float64)
            return (
                (pids[0], (g64 @ b64.T).astype(np.float32)),
                (pids[1], (a64.T @ g64).astype(np.float32)),
            )
        return bwd

    return _make("matmul", out, (a, b), build)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B,n,k) @ (B,k,m)."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not conform")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(np.float32)

    def build(pids):
        def bwd(g):
            g64 = g.astype(np.float64)
            return (
                (pids[0], (g64 @ b64.transpose(0, 2, 1)).astype(np.float32)),
                (pids[1], (a64.transpose(0, 2, 1) @ g64).astype(np.float32)),
            )
        return bwd

    return _make("bmm", out, (a, b), build)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims).astype(np.float32)
    src_shape = a.data.shape

    def build(pids):
        def bwd(g):
            gk = g
            if not keepdims:
                for ax in sorted(axes):
                    gk = np.expand_dims(gk, ax)
            return ((pids[0], np.broadcast_to(gk, src_shape).astype(np.float32)),)
        return bwd

    return _make("sum", out, (a,), build)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, dtype=np.float64, keepdims=keepdims).astype(np.float32)
    src_shape = a.data.shape

    def build(pids):
        def bwd(g):
            gk = g / np.float32(count)
            if not keepdims:
                for ax in sorted(axes):
                    gk = np.expand_dims(gk, ax)
            return ((pids[0], np.broadcast_to(gk, src_shape).astype(np.float32)),)
        return bwd

    return _make("mean", out, (a,), build)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if not np.all(np.isfinite(a.data)):
        raise DomainError("row_softmax: input has non-finite entries")
    z = a.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)

    def build(pids):
        def bwd(g):
            s64 = out.astype(np.float64)
            g64 = g.astype(np.float64)
            dot = (g64 * s64).sum(axis=-1, keepdims=True)
            return ((pids[0], (s64 * (g64 - dot)).astype(np.float32)),)
        return bwd

    return _make("row_softmax", out, (a,), build)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of one-hot `targets` against `logits` (n, C).

    Fuses log-softmax and NLL with a max-subtraction stabilizer; returns a
    length-n vector (reduce with tmean/tsum as needed).
    """
    t = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2 or t.shape != logits.data.shape:
        raise ShapeError(
            f"cross_entropy_with_logits: logits {logits.shape} vs targets {t.shape}"
        )
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = (lse[:, 0] - (t * z).sum(axis=1)).astype(np.float32)
    soft = np.exp(z - lse)

    def build(pids):
        def bwd(g):
            return ((pids[0], ((soft - t) * g[:, None].astype(np.float64)).astype(np.float32)),)
        return bwd

    return _make("cross_entropy_with_logits", out, (logits,), build)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """Update `params` (name -> Tensor) in place from `grads` (name -> array)."""
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"missing gradient for parameters: {missing}")
    state.step_count += 1
    t = state.step_count
    lr = np.float32(state.learning_rate)
    if state.kind == "sgd":
        for name, p in params.items():
            p.data -= lr * grads[name]
        return
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    eps = np.float32(state.eps)
    c1 = np.float32(1.0 - state.beta1**t)
    c2 = np.float32(1.0 - state.beta2**t)
    for name, p in params.items():
        g = grads[name]
        if name not in state.moments:
            state.moments[name] = (
                np.zeros_like(p.data),
                np.zeros_like(p.data),
            )
        m, v = state.moments[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
