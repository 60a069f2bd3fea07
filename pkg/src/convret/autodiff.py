"""Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors are immutable float64 arrays of rank <= 2. Operations optionally
record onto an explicit ``Tape``; ``backward`` replays the tape in reverse
to produce gradients for every leaf that requires them. The arithmetic op
set is deliberately small (matmul, dot, add/sub/mul, scalar mul, exp, log,
sigmoid, softmax, concat, mean, max-subtract); everything else in the
package is composed from it, plus a few gradient-identity structural ops
(reshape, transpose, row/element slicing) and ``rows_mean``, a sparse
specialization of multiplying an embedding matrix by a one-hot mean row.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError


class Tensor:
    """Immutable float64 array with shape, grad flag and last tape handle."""

    __slots__ = ("values", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64, order="C")
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} tensors are not supported")
        self.values = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.values.flags.writeable = False
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Build a tensor from array-like data."""
    return Tensor(values, requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    """Constant scalar tensor."""
    return Tensor(np.asarray(float(value)))


class _Node:
    __slots__ = ("op", "inputs", "saved", "out_id")

    def __init__(self, op: str, inputs: tuple[int, ...], saved: tuple, out_id: int):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.out_id = out_id


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: dict[int, int] = {}  # id(tensor) -> node id
        self._tensors: dict[int, Tensor] = {}  # node id -> tensor

    def _register(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), (), nid))
            self._ids[id(t)] = nid
            self._tensors[nid] = t
            t.node_id = nid
        return nid

    def _record(self, op: str, inputs: tuple[Tensor, ...], saved: tuple, out: Tensor) -> None:
        in_ids = tuple(self._register(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, in_ids, saved, nid))
        self._ids[id(out)] = nid
        self._tensors[nid] = out
        out.node_id = nid

    def node_of(self, t: Tensor) -> int | None:
        """Node id of a tensor on this tape, or None if never recorded here."""
        return self._ids.get(id(t))


def _emit(tape: Tape | None, op: str, inputs: tuple[Tensor, ...], saved: tuple,
          values: np.ndarray) -> Tensor:
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        tape._record(op, inputs, saved, out)
    return out


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _binary_shapes(a, b, "add")
    return _emit(tape, "add", (a, b), (a.shape, b.shape), a.values + b.values)


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _binary_shapes(a, b, "sub")
    return _emit(tape, "sub", (a, b), (a.shape, b.shape), a.values - b.values)


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise product; one side may be a scalar (broadcast)."""
    _binary_shapes(a, b, "mul")
    return _emit(tape, "mul", (a, b), (a.values, b.values), a.values * b.values)


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    """Multiply by a plain (non-differentiated) float."""
    return _emit(tape, "scale", (a,), (float(c),), a.values * float(c))


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.values.ndim == 0 or b.values.ndim == 0:
        raise DimensionError("matmul requires rank-1 or rank-2 operands")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul: inner dimensions {ka} and {kb} differ")
    return _emit(tape, "matmul", (a, b), (a.values, b.values), a.values @ b.values)


def dot(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape}")
    return _emit(tape, "dot", (a, b), (a.values, b.values), np.dot(a.values, b.values))


def exp(a: Tensor, tape: Tape | None = None) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("exp overflow; shift inputs with max_subtract first")
    return _emit(tape, "exp", (a,), (out,), out)


def log(a: Tensor, tape: Tape | None = None) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("log of a non-positive value")
    return _emit(tape, "log", (a,), (a.values,), out)


def sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(tape, "sigmoid", (a,), (out,), out)


def softmax(v: Tensor, tape: Tape | None = None) -> Tensor:
    if v.values.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {v.shape}")
    shifted = v.values - np.max(v.values)
    e = np.exp(shifted)
    out = e / np.sum(e)
    return _emit(tape, "softmax", (v,), (out,), out)


def concat(parts: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate scalars and vectors into one vector."""
    if not parts:
        raise DimensionError("concat of an empty list")
    flats = [p.values.reshape(-1) for p in parts]
    sizes = tuple(f.size for f in flats)
    return _emit(tape, "concat", tuple(parts),
                 (sizes, tuple(p.shape for p in parts)), np.concatenate(flats))


def mean(v: Tensor, tape: Tape | None = None) -> Tensor:
    if v.values.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"mean needs a non-empty vector, got shape {v.shape}")
    return _emit(tape, "mean", (v,), (v.shape[0],), np.mean(v.values))


def max_subtract(v: Tensor, tape: Tape | None = None) -> tuple[Tensor, float]:
    """Subtract the (detached) maximum; returns the shifted vector and the max."""
    if v.values.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"max_subtract needs a non-empty vector, got shape {v.shape}")
    m = float(np.max(v.values))
    return _emit(tape, "max_subtract", (v,), (), v.values - m), m


# structural ops: pure rearrangements, gradients pass through unchanged

def reshape(a: Tensor, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    return _emit(tape, "reshape", (a,), (a.shape,), a.values.reshape(shape))


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError("transpose needs a matrix")
    return _emit(tape, "transpose", (a,), (), a.values.T.copy())


def row(a: Tensor, i: int, tape: Tape | None = None) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError("row needs a matrix")
    return _emit(tape, "row", (a,), (int(i), a.shape), a.values[i].copy())


def element(v: Tensor, i: int, tape: Tape | None = None) -> Tensor:
    if v.values.ndim != 1:
        raise DimensionError("element needs a vector")
    return _emit(tape, "element", (v,), (int(i), v.shape), v.values[i])


def rows_mean(table: Tensor, ids: list[int], tape: Tape | None = None) -> Tensor:
    """Mean of the given rows of a matrix (duplicates count multiply).

    Equivalent to multiplying the table by a normalized one-hot count row;
    implemented sparsely so the backward pass touches only the used rows.
    """
    if table.values.ndim != 2:
        raise DimensionError("rows_mean needs a matrix")
    if not ids:
        raise DimensionError("rows_mean of an empty id list")
    idx = np.asarray(ids, dtype=np.intp)
    out = table.values[idx].mean(axis=0)
    return _emit(tape, "rows_mean", (table,), (idx, table.shape), out)


# ---------------------------------------------------------------------------
# composed helpers (no new primitives)
# ---------------------------------------------------------------------------

def vsum(v: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of a vector: mean scaled by length."""
    return scale(mean(v, tape), v.shape[0], tape)


def tanh(a: Tensor, tape: Tape | None = None) -> Tensor:
    """tanh(x) = 2*sigmoid(2x) - 1, composed from the primitive set."""
    s = sigmoid(scale(a, 2.0, tape), tape)
    return sub(scale(s, 2.0, tape), Tensor(np.ones(a.shape)), tape)


def logsumexp(v: Tensor, tape: Tape | None = None) -> Tensor:
    """log(sum(exp(v))) with max-subtraction for stability."""
    shifted, m = max_subtract(v, tape)
    return add(log(vsum(exp(shifted, tape), tape), tape), scalar(m), tape)


def stack(vectors: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    d = vectors[0].shape[0]
    return reshape(concat(vectors, tape), (len(vectors), d), tape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _acc(store: dict, nid: int, g: np.ndarray) -> None:
    buf = store.get(nid)
    if buf is None:
        store[nid] = np.array(g, dtype=np.float64)
    else:
        buf += g


def _acc_rows(store: dict, nid: int, shape: tuple, idx: np.ndarray, g_row: np.ndarray) -> None:
    buf = store.get(nid)
    if buf is None:
        buf = np.zeros(shape)
        store[nid] = buf
    np.add.at(buf, idx, g_row)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.sum(g) if shape == () and np.ndim(g) != 0 else g


def _vjp_add(node, g, store):
    sa, sb = node.saved
    _acc(store, node.inputs[0], _reduce_to(g, sa))
    _acc(store, node.inputs[1], _reduce_to(g, sb))


def _vjp_sub(node, g, store):
    sa, sb = node.saved
    _acc(store, node.inputs[0], _reduce_to(g, sa))
    _acc(store, node.inputs[1], _reduce_to(-g, sb))


def _vjp_mul(node, g, store):
    av, bv = node.saved
    _acc(store, node.inputs[0], _reduce_to(g * bv, av.shape))
    _acc(store, node.inputs[1], _reduce_to(g * av, bv.shape))


def _vjp_scale(node, g, store):
    _acc(store, node.inputs[0], g * node.saved[0])


def _vjp_matmul(node, g, store):
    av, bv = node.saved
    if av.ndim == 2 and bv.ndim == 2:
        _acc(store, node.inputs[0], g @ bv.T)
        _acc(store, node.inputs[1], av.T @ g)
    elif av.ndim == 2:  # (m,k) @ (k,) -> (m,)
        _acc(store, node.inputs[0], np.outer(g, bv))
        _acc(store, node.inputs[1], av.T @ g)
    else:  # (k,) @ (k,n) -> (n,)
        _acc(store, node.inputs[0], bv @ g)
        _acc(store, node.inputs[1], np.outer(av, g))


def _vjp_dot(node, g, store):
    av, bv = node.saved
    _acc(store, node.inputs[0], g * bv)
    _acc(store, node.inputs[1], g * av)


def _vjp_exp(node, g, store):
    _acc(store, node.inputs[0], g * node.saved[0])


def _vjp_log(node, g, store):
    _acc(store, node.inputs[0], g / node.saved[0])


def _vjp_sigmoid(node, g, store):
    s = node.saved[0]
    _acc(store, node.inputs[0], g * s * (1.0 - s))


def _vjp_softmax(node, g, store):
    s = node.saved[0]
    _acc(store, node.inputs[0], s * (g - np.dot(g, s)))


def _vjp_concat(node, g, store):
    sizes, shapes = node.saved
    offset = 0
    for nid, size, shp in zip(node.inputs, sizes, shapes):
        _acc(store, nid, g[offset:offset + size].reshape(shp))
        offset += size


def _vjp_mean(node, g, store):
    n = node.saved[0]
    _acc(store, node.inputs[0], np.full(n, g / n))


def _vjp_max_subtract(node, g, store):
    _acc(store, node.inputs[0], g)


def _vjp_reshape(node, g, store):
    _acc(store, node.inputs[0], g.reshape(node.saved[0]))


def _vjp_transpose(node, g, store):
    _acc(store, node.inputs[0], g.T)


def _vjp_row(node, g, store):
    i, shape = node.saved
    buf = store.get(node.inputs[0])
    if buf is None:
        buf = np.zeros(shape)
        store[node.inputs[0]] = buf
    buf[i] += g


def _vjp_element(node, g, store):
    i, shape = node.saved
    buf = store.get(node.inputs[0])
    if buf is None:
        buf = np.zeros(shape)
        store[node.inputs[0]] = buf
    buf[i] += g


def _vjp_rows_mean(node, g, store):
    idx, shape = node.saved
    _acc_rows(store, node.inputs[0], shape, idx, g / idx.size)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "dot": _vjp_dot,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sigmoid": _vjp_sigmoid,
    "softmax": _vjp_softmax,
    "concat": _vjp_concat,
    "mean": _vjp_mean,
    "max_subtract": _vjp_max_subtract,
    "reshape": _vjp_reshape,
    "transpose": _vjp_transpose,
    "row": _vjp_row,
    "element": _vjp_element,
    "rows_mean": _vjp_rows_mean,
}


def backward(tape: Tape, output: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar output for every requires_grad leaf on the tape.

    Leaves that do not influence the output get zero gradients. The pass is
    stateless: repeating it over the same tape yields identical maps.
    """
    if output.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    out_id = tape.node_of(output)
    if out_id is None:
        raise ContractError("output was not recorded on this tape")
    store: dict[int, np.ndarray] = {out_id: np.ones(())}
    for node in reversed(tape.nodes):
        if node.op == "leaf":
            continue
        g = store.get(node.out_id)
        if g is None:
            continue
        _VJP[node.op](node, g, store)
    grads: dict[int, Tensor] = {}
    for node in tape.nodes:
        if node.op != "leaf":
            continue
        leaf = tape._tensors[node.out_id]
        if not leaf.requires_grad:
            continue
        buf = store.get(node.out_id)
        grads[node.out_id] = Tensor(buf if buf is not None else np.zeros(leaf.shape))
    return grads


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params: dict[str, Tensor], eps: float = 1e-4,
               rng: np.random.Generator | None = None,
               max_coords: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (Tape, Tensor)`` must be a pure scalar function of the
    parameter dict. Relative error uses max(|analytic|, |numeric|, 1e-8) as
    the denominator. ``max_coords`` caps how many coordinates are probed
    (sampled with ``rng``); by default every coordinate is checked.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")

    def evaluate(p):
        tape, out = f(p)
        val = out.item()
        if not np.isfinite(val):
            raise EvaluationError("objective is not finite")
        return tape, out, val

    tape, out, _ = evaluate(params)
    grads = backward(tape, out)
    analytic = {}
    for name, t in params.items():
        nid = tape.node_of(t)
        if nid is not None and nid in grads:
            analytic[name] = grads[nid].values
        else:
            analytic[name] = np.zeros(t.shape)

    coords = [(name, i) for name, t in params.items() for i in range(t.values.size)]
    if max_coords is not None and max_coords < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for name, i in coords:
        base = params[name].values
        for sign in (+1.0, -1.0):
            bumped = base.copy()
            bumped.flat[i] += sign * eps
            shifted = dict(params)
            shifted[name] = Tensor(bumped, requires_grad=True)
            _, _, val = evaluate(shifted)
            if sign > 0:
                f_plus = val
            else:
                f_minus = val
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
