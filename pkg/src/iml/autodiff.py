"""Reverse-mode automatic differentiation on an explicit operation tape.

Everything is 64-bit float numpy underneath.  A :class:`Tensor` either
carries a ``(tape, node)`` pair -- in which case feeding it to an op
records a new node on that tape -- or it is a plain constant and ops just
compute values without recording anything.  The tape is a flat Wengert
list: node ids are list positions, so the list order *is* a topological
order and :meth:`Tape.backward` is one reverse sweep.

Each primitive op is a (forward, vjp) pair of pure functions registered
in ``_OPS``; nodes store only the op name, input ids, saved output and
static auxiliary data, which keeps the tape replayable.
"""
from __future__ import annotations

import numbers
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# Gradient maps returned by Tape.backward: leaf node id -> dense gradient.
Gradients = dict[int, Array]


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 value, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __float__(self) -> float:
        if self.data.shape != ():
            raise ValueError(f"tensor of shape {self.data.shape} is not a scalar")
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"


def constant(x) -> Tensor:
    """Wrap a value as an off-tape constant tensor."""
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One tape record: which op ran, on which node ids, and what came out."""

    op: str
    inputs: tuple[int, ...]
    value: Array
    aux: tuple = ()


@dataclass(frozen=True)
class OpSpec:
    fwd: Callable[[list[Array], tuple], Array]
    vjp: Callable[[list[Array], tuple, Array, Array], list["Array | None"]]


class Tape:
    """Append-only record of primitive ops; differentiable and replayable."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        """Register a parameter whose gradient may be requested later."""
        nid = self._push(Node("leaf", (), _as_array(value).copy()))
        return Tensor(self.nodes[nid].value, self, nid)

    def const(self, value) -> int:
        """Intern a constant operand as a terminal node."""
        return self._push(Node("const", (), _as_array(value)))

    def backward(self, loss: Tensor, params: Sequence[int]) -> Gradients:
        """Reverse sweep from a scalar loss.

        Returns one gradient per requested leaf id; leaves the loss never
        touched get explicit zeros.  Accumulation order is the fixed
        reverse tape order, so repeated calls are bit-identical.
        """
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.shape != ():
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        for pid in params:
            if not (0 <= pid < len(self.nodes)) or self.nodes[pid].op != "leaf":
                raise ValueError(f"parameter id {pid} is not a leaf on this tape")

        grads: list[Array | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones((), dtype=np.float64)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op in ("leaf", "const"):
                continue
            values = [self.nodes[i].value for i in node.inputs]
            parts = _OPS[node.op].vjp(values, node.aux, node.value, g)
            for i, part in zip(node.inputs, parts):
                if part is None:
                    continue
                if grads[i] is None:
                    grads[i] = np.zeros_like(self.nodes[i].value)
                grads[i] += part
        return {
            pid: (
                grads[pid]
                if grads[pid] is not None
                else np.zeros_like(self.nodes[pid].value)
            )
            for pid in params
        }

    def replay(self) -> bool:
        """Recompute every node from its terminals; True iff all values match bit-for-bit."""
        values: list[Array] = []
        ok = True
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(node.value)
                continue
            out = _OPS[node.op].fwd([values[i] for i in node.inputs], node.aux)
            ok = ok and np.array_equal(out, node.value)
            values.append(out)
        return ok


def _apply(op: str, tensors: Sequence[Tensor], aux: tuple = ()) -> Tensor:
    tape: Tape | None = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    out = _OPS[op].fwd([t.data for t in tensors], aux)
    if tape is None:
        return Tensor(out)
    ids = tuple(
        t.node if (t.tape is tape and t.node is not None) else tape.const(t.data)
        for t in tensors
    )
    nid = tape._push(Node(op, ids, out, aux))
    return Tensor(out, tape, nid)


# ---------------------------------------------------------------------------
# primitive ops: forward + vector-Jacobian product


def _need_same_shape(a: Array, b: Array, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fwd_matmul(v, aux):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(v, aux, out, g):
    a, b = v
    return [g @ b.T, a.T @ g]


def _fwd_add(v, aux):
    _need_same_shape(v[0], v[1], "add")
    return v[0] + v[1]


def _fwd_sub(v, aux):
    _need_same_shape(v[0], v[1], "sub")
    return v[0] - v[1]


def _fwd_mul(v, aux):
    _need_same_shape(v[0], v[1], "mul")
    return v[0] * v[1]


def _fwd_adds(v, aux):
    return v[0] + aux[0]


def _fwd_subs(v, aux):
    return v[0] - aux[0]


def _fwd_scale(v, aux):
    return v[0] * aux[0]


def _fwd_addrow(v, aux):
    m, row = v
    if m.ndim != 2 or row.ndim != 1 or m.shape[1] != row.shape[0]:
        raise ValueError(f"add_rowvec: shapes {m.shape} and {row.shape}")
    return m + row[None, :]


def _fwd_relu(v, aux):
    return np.maximum(v[0], 0.0)


def _vjp_relu(v, aux, out, g):
    # Subgradient 0 at the kink.
    return [g * (v[0] > 0.0)]


def _fwd_pairsq(v, aux):
    z, c = v
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != c.shape[1]:
        raise ValueError(f"pairwise_sqdist: shapes {z.shape} and {c.shape}")
    d = z[:, None, :] - c[None, :, :]
    return np.einsum("ikj,ikj->ik", d, d)


def _vjp_pairsq(v, aux, out, g):
    z, c = v
    d = z[:, None, :] - c[None, :, :]
    gz = 2.0 * np.einsum("ik,ikj->ij", g, d)
    gc = -2.0 * np.einsum("ik,ikj->kj", g, d)
    return [gz, gc]


def _fwd_lse(v, aux):
    (x,) = v
    if x.ndim != 1 or x.shape[0] == 0:
        raise ValueError("logsumexp: need a non-empty 1-D input")
    m = x.max()
    return np.asarray(m + np.log(np.exp(x - m).sum()))


def _vjp_lse(v, aux, out, g):
    (x,) = v
    e = np.exp(x - x.max())
    return [g * (e / e.sum())]


def _fwd_lse_rows(v, aux):
    (x,) = v
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("logsumexp_rows: need a 2-D input with columns")
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def _vjp_lse_rows(v, aux, out, g):
    (x,) = v
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return [g[:, None] * (e / e.sum(axis=1, keepdims=True))]


def _check_temperature(aux):
    if aux[0] <= 0.0:
        raise ValueError(f"temperature must be positive, got {aux[0]}")


def _fwd_softmax(v, aux):
    _check_temperature(aux)
    (x,) = v
    if x.ndim != 1 or x.shape[0] == 0:
        raise ValueError("softmax: need a non-empty 1-D input")
    e = np.exp((x - x.max()) / aux[0])
    return e / e.sum()


def _vjp_softmax(v, aux, out, g):
    return [(out * (g - (g * out).sum())) / aux[0]]


def _fwd_softmax_rows(v, aux):
    _check_temperature(aux)
    (x,) = v
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("softmax_rows: need a 2-D input with columns")
    e = np.exp((x - x.max(axis=1, keepdims=True)) / aux[0])
    return e / e.sum(axis=1, keepdims=True)


def _vjp_softmax_rows(v, aux, out, g):
    return [(out * (g - (g * out).sum(axis=1, keepdims=True))) / aux[0]]


def _kl_terms(p: Array, q: Array, op: str) -> Array:
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise ValueError(f"{op}: distributions must be non-negative")
    pos = p > 0.0
    if np.any(pos & (q == 0.0)):
        raise ValueError(f"{op}: q has zero mass where p is positive")
    terms = np.zeros_like(p)
    # 0 * log 0 taken as 0.
    terms[pos] = p[pos] * np.log(p[pos] / q[pos])
    return terms


def _check_normalized(x: Array, axis, op: str) -> None:
    sums = x.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"{op}: inputs must sum to 1 along the class axis")


def _fwd_kl(v, aux):
    p, q = v
    _need_same_shape(p, q, "kl_div")
    if p.ndim != 1 or p.shape[0] == 0:
        raise ValueError("kl_div: need non-empty 1-D distributions")
    _check_normalized(p, None, "kl_div")
    _check_normalized(q, None, "kl_div")
    return np.asarray(_kl_terms(p, q, "kl_div").sum())


def _fwd_kl_rows(v, aux):
    p, q = v
    _need_same_shape(p, q, "kl_div_rows")
    if p.ndim != 2 or p.shape[1] == 0:
        raise ValueError("kl_div_rows: need 2-D row distributions")
    _check_normalized(p, 1, "kl_div_rows")
    _check_normalized(q, 1, "kl_div_rows")
    return _kl_terms(p, q, "kl_div_rows").sum(axis=1)


def _vjp_kl(v, aux, out, g):
    p, q = v
    pos = p > 0.0
    gp = np.zeros_like(p)
    gq = np.zeros_like(q)
    gp[pos] = (np.log(p[pos] / q[pos]) + 1.0) * g
    gq[pos] = -(p[pos] / q[pos]) * g
    return [gp, gq]


def _vjp_kl_rows(v, aux, out, g):
    p, q = v
    pos = p > 0.0
    grow = np.broadcast_to(g[:, None], p.shape)
    gp = np.zeros_like(p)
    gq = np.zeros_like(q)
    gp[pos] = (np.log(p[pos] / q[pos]) + 1.0) * grow[pos]
    gq[pos] = -(p[pos] / q[pos]) * grow[pos]
    return [gp, gq]


def _fwd_rowsel(v, aux):
    (m,) = v
    idx = np.asarray(aux[0], dtype=np.intp)
    if m.ndim != 2 or idx.ndim != 1 or idx.shape[0] != m.shape[0]:
        raise ValueError("take_per_row: need one column index per row")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= m.shape[1]:
        raise ValueError("take_per_row: column index out of range")
    return m[np.arange(m.shape[0]), idx]


def _vjp_rowsel(v, aux, out, g):
    (m,) = v
    idx = np.asarray(aux[0], dtype=np.intp)
    gm = np.zeros_like(m)
    gm[np.arange(m.shape[0]), idx] = g
    return [gm]


def _fwd_cmeans(v, aux):
    (z,) = v
    labels = np.asarray(aux[0], dtype=np.int64)
    k = aux[1]
    if z.ndim != 2 or labels.ndim != 1 or labels.shape[0] != z.shape[0]:
        raise ValueError("class_means: need one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class_means: labels must lie in [0, {k})")
    out = np.empty((k, z.shape[1]), dtype=np.float64)
    for c in range(k):
        rows = z[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class_means: class {c} has no members")
        out[c] = rows.mean(axis=0)
    return out


def _vjp_cmeans(v, aux, out, g):
    (z,) = v
    labels = np.asarray(aux[0], dtype=np.int64)
    counts = np.bincount(labels, minlength=aux[1]).astype(np.float64)
    return [g[labels] / counts[labels][:, None]]


def _fwd_sum(v, aux):
    return np.asarray(v[0].sum())


def _vjp_sum(v, aux, out, g):
    return [np.full_like(v[0], 1.0) * g]


def _fwd_mean(v, aux):
    if v[0].size == 0:
        raise ValueError("mean of an empty tensor is undefined")
    return np.asarray(v[0].mean())


def _vjp_mean(v, aux, out, g):
    return [np.full_like(v[0], 1.0) * (g / v[0].size)]


_OPS: dict[str, OpSpec] = {
    "matmul": OpSpec(_fwd_matmul, _vjp_matmul),
    "add": OpSpec(_fwd_add, lambda v, aux, out, g: [g, g]),
    "sub": OpSpec(_fwd_sub, lambda v, aux, out, g: [g, -g]),
    "mul": OpSpec(_fwd_mul, lambda v, aux, out, g: [g * v[1], g * v[0]]),
    "adds": OpSpec(_fwd_adds, lambda v, aux, out, g: [g]),
    "subs": OpSpec(_fwd_subs, lambda v, aux, out, g: [g]),
    "scale": OpSpec(_fwd_scale, lambda v, aux, out, g: [g * aux[0]]),
    "add_rowvec": OpSpec(_fwd_addrow, lambda v, aux, out, g: [g, g.sum(axis=0)]),
    "relu": OpSpec(_fwd_relu, _vjp_relu),
    "pairwise_sqdist": OpSpec(_fwd_pairsq, _vjp_pairsq),
    "logsumexp": OpSpec(_fwd_lse, _vjp_lse),
    "logsumexp_rows": OpSpec(_fwd_lse_rows, _vjp_lse_rows),
    "softmax": OpSpec(_fwd_softmax, _vjp_softmax),
    "softmax_rows": OpSpec(_fwd_softmax_rows, _vjp_softmax_rows),
    "kl_div": OpSpec(_fwd_kl, _vjp_kl),
    "kl_div_rows": OpSpec(_fwd_kl_rows, _vjp_kl_rows),
    "take_per_row": OpSpec(_fwd_rowsel, _vjp_rowsel),
    "class_means": OpSpec(_fwd_cmeans, _vjp_cmeans),
    "sum": OpSpec(_fwd_sum, _vjp_sum),
    "mean": OpSpec(_fwd_mean, _vjp_mean),
}


# ---------------------------------------------------------------------------
# public op surface


def matmul(a, b) -> Tensor:
    return _apply("matmul", (as_tensor(a), as_tensor(b)))


def add(a, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return _apply("adds", (as_tensor(a),), (float(b),))
    return _apply("add", (as_tensor(a), as_tensor(b)))


def sub(a, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return _apply("subs", (as_tensor(a),), (float(b),))
    return _apply("sub", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    if isinstance(b, numbers.Real):
        return scale(a, b)
    return _apply("mul", (as_tensor(a), as_tensor(b)))


def scale(a, s) -> Tensor:
    if not isinstance(s, numbers.Real):
        raise ValueError("scale expects a python scalar factor")
    return _apply("scale", (as_tensor(a),), (float(s),))


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch add|sub|mul|scale; ``b`` may be a tensor or a scalar."""
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def relu(x) -> Tensor:
    return _apply("relu", (as_tensor(x),))


def add_rowvec(m, row) -> Tensor:
    """Add a length-F row vector to every row of an (n, F) matrix."""
    return _apply("add_rowvec", (as_tensor(m), as_tensor(row)))


def pairwise_sqdist(z, c) -> Tensor:
    """All squared Euclidean distances between rows of z and rows of c."""
    return _apply("pairwise_sqdist", (as_tensor(z), as_tensor(c)))


def logsumexp(v) -> Tensor:
    """Max-shifted log-sum-exp of a 1-D vector."""
    return _apply("logsumexp", (as_tensor(v),))


def logsumexp_rows(m) -> Tensor:
    return _apply("logsumexp_rows", (as_tensor(m),))


def softmax(v, temperature: float = 1.0) -> Tensor:
    """Tempered softmax of a 1-D vector, computed max-shifted."""
    return _apply("softmax", (as_tensor(v),), (float(temperature),))


def softmax_rows(m, temperature: float = 1.0) -> Tensor:
    return _apply("softmax_rows", (as_tensor(m),), (float(temperature),))


def kl_div(p, q) -> Tensor:
    """KL(p || q) between two 1-D distributions; 0*log 0 contributes 0."""
    return _apply("kl_div", (as_tensor(p), as_tensor(q)))


def kl_div_rows(p, q) -> Tensor:
    """Row-wise KL divergence between matching rows of two matrices."""
    return _apply("kl_div_rows", (as_tensor(p), as_tensor(q)))


def take_per_row(m, indices) -> Tensor:
    return _apply("take_per_row", (as_tensor(m),), (tuple(int(i) for i in indices),))


def class_means(z, labels, n_classes: int) -> Tensor:
    """Per-class mean of rows of z grouped by integer labels 0..n_classes-1."""
    return _apply(
        "class_means",
        (as_tensor(z),),
        (tuple(int(i) for i in labels), int(n_classes)),
    )


def tsum(x) -> Tensor:
    return _apply("sum", (as_tensor(x),))


def tmean(x) -> Tensor:
    return _apply("mean", (as_tensor(x),))


def grad_check(f, params: Sequence[Array], h: float = 1e-4) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes a list of tensors and returns a scalar tensor.  Returns the
    worst coordinate-wise relative error |analytic - central| / max(1, |a|, |c|).
    """
    arrays = [_as_array(p) for p in params]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(leaves)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ValueError("grad_check expects f to return a scalar tensor")
    grads = tape.backward(out, [t.node for t in leaves])

    def value_at(replaced: list[Array]) -> float:
        return float(f([Tensor(a) for a in replaced]))

    worst = 0.0
    for pi, base in enumerate(arrays):
        analytic = grads[leaves[pi].node]
        for idx in np.ndindex(*base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[pi][idx] += h
            minus[pi][idx] -= h
            central = (value_at(plus) - value_at(minus)) / (2.0 * h)
            a_val = float(analytic[idx])
            err = abs(a_val - central) / max(1.0, abs(a_val), abs(central))
            worst = max(worst, err)
    return worst
