"""Reverse-mode autodiff on a flat tape with a fixed op vocabulary.

Ops are recorded eagerly: record() computes the forward value immediately and
caches it on the node.  backward() walks the tape once in reverse from a
scalar loss, accumulating adjoints in float64 and returning float32 gradients
for trainable leaves only.  The vocabulary is fixed (matmul, col_scale, add,
relu, softmax, reduce, slice, concat, scalar_mul plus const/param leaves);
there are no closures on the tape, so a tape is replayable and serializable
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor
from .tensor import F32, ShapeError

OPS = (
    "const",
    "param",
    "matmul",
    "col_scale",
    "add",
    "relu",
    "softmax",
    "reduce",
    "slice",
    "concat",
    "scalar_mul",
)

REDUCE_KINDS = ("dot", "absdot", "l2norm")


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray | float
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only op tape.  Node ids are list indices."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray | float:
        return self.nodes[nid].value

    # -- leaves ---------------------------------------------------------

    def constant(self, value) -> int:
        return self._push(Node("const", (), _freeze(value)))

    def param(self, value) -> int:
        return self._push(Node("param", (), _freeze(value)))

    # -- recording ------------------------------------------------------

    def record(self, op: str, inputs: tuple[int, ...], **attrs) -> int:
        """Append an op node, computing its value from cached input values."""
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}; vocabulary is {OPS}")
        if op in ("const", "param"):
            raise ValueError(f"{op} nodes are created via constant()/param()")
        vals = [self.nodes[i].value for i in inputs]
        value = _evaluate(op, vals, attrs)
        return self._push(Node(op, tuple(inputs), value, attrs))

    def matmul(self, a: int, b: int) -> int:
        return self.record("matmul", (a, b))

    def col_scale(self, m: int, w: int) -> int:
        return self.record("col_scale", (m, w))

    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b))

    def relu(self, a: int) -> int:
        return self.record("relu", (a,))

    def softmax(self, a: int) -> int:
        return self.record("softmax", (a,))

    def scalar_mul(self, c: float, a: int) -> int:
        return self.record("scalar_mul", (a,), c=float(c))

    def slice_index(self, a: int, axis: int, index: int) -> int:
        return self.record("slice", (a,), axis=axis, index=index)

    def concat(self, parts: list[int], axis: int = 0) -> int:
        return self.record("concat", tuple(parts), axis=axis)

    def reduce(self, kind: str, *args: int) -> int:
        if kind not in REDUCE_KINDS:
            raise ValueError(f"unknown reduce kind {kind!r}; kinds are {REDUCE_KINDS}")
        return self.record("reduce", args, kind=kind)

    def dot(self, a: int, b: int) -> int:
        return self.reduce("dot", a, b)

    def absdot(self, a: int, b: int) -> int:
        return self.reduce("absdot", a, b)

    def l2norm(self, a: int) -> int:
        return self.reduce("l2norm", a)

    def sub(self, a: int, b: int) -> int:
        """a - b via the vocabulary (add + scalar_mul)."""
        return self.add(a, self.scalar_mul(-1.0, b))

    # -- replay / backward ---------------------------------------------

    def replay_equal(self) -> bool:
        """Recompute every op node from its inputs; True iff values match exactly."""
        for node in self.nodes:
            if node.op in ("const", "param"):
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            fresh = _evaluate(node.op, vals, node.attrs)
            if isinstance(fresh, float):
                if fresh != node.value:
                    return False
            elif not np.array_equal(fresh, node.value):
                return False
        return True

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss node w.r.t. every param leaf.

        Adjoints accumulate in float64; the returned arrays are float32 and
        keyed by param node id.  Non-param leaves get no entry.
        """
        if not isinstance(self.nodes[loss].value, float):
            raise ValueError(f"backward() needs a scalar loss node, got node {loss} "
                             f"with value shape {np.shape(self.nodes[loss].value)}")
        adj: dict[int, np.ndarray | float] = {loss: 1.0}
        for nid in range(loss, -1, -1):
            if nid not in adj:
                continue
            node = self.nodes[nid]
            if node.op in ("const", "param"):
                continue
            upstream = adj.pop(nid)
            vals = [self.nodes[i].value for i in node.inputs]
            for inp, grad in zip(node.inputs, _backward(node, vals, upstream)):
                if grad is None:
                    continue
                if inp in adj:
                    adj[inp] = adj[inp] + grad
                else:
                    adj[inp] = grad
        out: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self.nodes):
            if node.op == "param":
                g = adj.get(nid)
                if g is None:
                    g = np.zeros_like(np.asarray(node.value, dtype=np.float64))
                out[nid] = np.asarray(g, dtype=np.float64).astype(F32)
        return out


def _freeze(value):
    if isinstance(value, (int, float)):
        return float(value)
    arr = tensor.as_f32(value).copy()
    arr.setflags(write=False)
    return arr


def _evaluate(op: str, vals: list, attrs: dict):
    if op == "matmul":
        return tensor.matmul(vals[0], vals[1])
    if op == "col_scale":
        return tensor.col_scale(vals[0], vals[1])
    if op == "add":
        if isinstance(vals[0], float) and isinstance(vals[1], float):
            return vals[0] + vals[1]
        return tensor.add(vals[0], vals[1])
    if op == "relu":
        return tensor.relu(vals[0])
    if op == "softmax":
        return tensor.softmax(vals[0])
    if op == "scalar_mul":
        c = attrs["c"]
        if isinstance(vals[0], float):
            return c * vals[0]
        return tensor.scale(c, vals[0])
    if op == "slice":
        return np.take(vals[0], attrs["index"], axis=attrs["axis"]).astype(F32)
    if op == "concat":
        return np.concatenate(vals, axis=attrs["axis"]).astype(F32)
    if op == "reduce":
        kind = attrs["kind"]
        if kind == "dot":
            return tensor.dot(vals[0], vals[1])
        if kind == "absdot":
            return tensor.absdot(vals[0], vals[1])
        return tensor.l2_norm(vals[0])
    raise AssertionError(op)


def _backward(node: Node, vals: list, upstream):
    """Gradient of one node w.r.t. each input (float64), or None per input."""
    op = node.op
    if op == "matmul":
        a = np.asarray(vals[0], dtype=np.float64)
        b = np.asarray(vals[1], dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        if a.ndim == 2 and b.ndim == 2:
            return (u @ b.T, a.T @ u)
        if a.ndim == 2 and b.ndim == 1:
            return (np.outer(u, b), a.T @ u)
        # 1-D @ 2-D
        return (b @ u, np.outer(a, u))
    if op == "col_scale":
        m = np.asarray(vals[0], dtype=np.float64)
        w = np.asarray(vals[1], dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        return ((u * w).sum(axis=0), u * m[np.newaxis, :])
    if op == "add":
        if isinstance(vals[0], float):
            return (upstream, upstream)
        a = vals[0]
        b = vals[1]
        u = np.asarray(upstream, dtype=np.float64)
        gb = u.sum(axis=0) if (a.ndim == 2 and b.ndim == 1) else u
        return (u, gb)
    if op == "relu":
        u = np.asarray(upstream, dtype=np.float64)
        return (u * (np.asarray(vals[0]) > 0),)
    if op == "softmax":
        s = np.asarray(node.value, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        return (s * (u - float(u @ s)),)
    if op == "scalar_mul":
        c = node.attrs["c"]
        if isinstance(vals[0], float):
            return (c * upstream,)
        return (c * np.asarray(upstream, dtype=np.float64),)
    if op == "slice":
        g = np.zeros(np.asarray(vals[0]).shape, dtype=np.float64)
        idx = [slice(None)] * g.ndim
        idx[node.attrs["axis"]] = node.attrs["index"]
        g[tuple(idx)] = np.asarray(upstream, dtype=np.float64)
        return (g,)
    if op == "concat":
        axis = node.attrs["axis"]
        u = np.asarray(upstream, dtype=np.float64)
        sizes = [np.asarray(v).shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(u, splits, axis=axis))
    if op == "reduce":
        kind = node.attrs["kind"]
        u = float(upstream)
        if kind == "dot":
            a = np.asarray(vals[0], dtype=np.float64)
            b = np.asarray(vals[1], dtype=np.float64)
            return (u * b, u * a)
        if kind == "absdot":
            a = np.asarray(vals[0], dtype=np.float64)
            b = np.asarray(vals[1], dtype=np.float64)
            s = np.sign(float(np.sum(a * b)))
            return (u * s * b, u * s * a)
        # l2norm; subgradient 0 at the origin
        a = np.asarray(vals[0], dtype=np.float64)
        n = float(node.value)
        if n == 0.0:
            return (np.zeros_like(a),)
        return (u * a / n,)
    raise AssertionError(op)


# -- optimizer ----------------------------------------------------------


@dataclass
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """Decoupled-weight-decay Adam.

    Moments are kept in float64; updated parameters are rounded to float32.
    step() is functional: it returns a new params dict and leaves the inputs
    untouched (the moment state advances in place).
    """

    def __init__(self, params: dict[str, np.ndarray], cfg: AdamWConfig):
        self.cfg = cfg
        self.t = 0
        self._m = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}
        self._v = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        out: dict[str, np.ndarray] = {}
        for key in sorted(params):
            p = np.asarray(params[key], dtype=np.float64)
            g = np.asarray(grads[key], dtype=np.float64)
            m = self._m[key] = cfg.beta1 * self._m[key] + (1.0 - cfg.beta1) * g
            v = self._v[key] = cfg.beta2 * self._v[key] + (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p
            out[key] = (p - cfg.lr * update).astype(F32)
        return out


# -- gradient checking --------------------------------------------------


def _evaluate_f64(op: str, vals: list, attrs: dict):
    """One tape op in float64 with no intermediate rounding.

    Mirrors _evaluate op for op; used only by the finite-difference oracle,
    where float32 rounding of the forward pass would otherwise dominate the
    difference quotient (forward noise of ~1e-7 divided by the step h).
    """
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "col_scale":
        return vals[1] * vals[0][np.newaxis, :]
    if op == "add":
        return vals[0] + vals[1]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "softmax":
        x = vals[0] - vals[0].max()
        e = np.exp(x)
        return e / e.sum()
    if op == "scalar_mul":
        return attrs["c"] * vals[0]
    if op == "slice":
        return np.take(vals[0], attrs["index"], axis=attrs["axis"])
    if op == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if op == "reduce":
        kind = attrs["kind"]
        if kind == "dot":
            return float(np.sum(vals[0] * vals[1]))
        if kind == "absdot":
            return abs(float(np.sum(vals[0] * vals[1])))
        return float(np.sqrt(np.sum(vals[0] * vals[0])))
    raise AssertionError(op)


def _leaf_f64(value):
    if isinstance(value, float):
        return value
    return np.asarray(value, dtype=np.float64)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    passed: bool


def grad_check(
    build_loss: Callable[[Tape, dict[str, int]], int],
    params: dict[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare backward() gradients against central finite differences.

    build_loss(tape, param_nodes) must be a pure function of the given params
    and return a scalar loss node.  The analytic gradients come from
    backward() on the float32 tape; the finite-difference reference re-runs
    the recorded program in float64 with one parameter entry nudged by +/-h,
    so the difference quotient is free of float32 forward-rounding noise
    (which at h=1e-3 would sit near the 1e-3 tolerance itself).  Only nodes
    downstream of the perturbed leaf are recomputed.  The per-parameter error
    is ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-12).
    """
    if h <= 0.0:
        raise ValueError(f"grad_check step must be positive, got h={h}")

    tape = Tape()
    param_nodes = {k: tape.param(v) for k, v in params.items()}
    loss_node = build_loss(tape, param_nodes)
    grads_by_id = tape.backward(loss_node)
    analytic = {k: grads_by_id[nid] for k, nid in param_nodes.items()}

    base_vals: list = [None] * (loss_node + 1)
    for nid in range(loss_node + 1):
        node = tape.nodes[nid]
        if node.op in ("const", "param"):
            base_vals[nid] = _leaf_f64(node.value)
        else:
            base_vals[nid] = _evaluate_f64(
                node.op, [base_vals[i] for i in node.inputs], node.attrs)

    per_param: dict[str, float] = {}
    for key in sorted(params):
        nid = param_nodes[key]
        dirty = {nid}
        order = []
        for j in range(nid + 1, loss_node + 1):
            node = tape.nodes[j]
            if node.op not in ("const", "param") and any(i in dirty for i in node.inputs):
                dirty.add(j)
                order.append(j)

        pert = np.array(base_vals[nid], dtype=np.float64, copy=True)
        flat = pert.reshape(-1)
        fd = np.zeros(pert.shape, dtype=np.float64)
        fd_flat = fd.reshape(-1)
        scratch = list(base_vals)
        scratch[nid] = pert

        def replay() -> float:
            for j in order:
                node = tape.nodes[j]
                scratch[j] = _evaluate_f64(
                    node.op, [scratch[i] for i in node.inputs], node.attrs)
            return float(scratch[loss_node])

        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = replay()
            flat[i] = orig - h
            f_minus = replay()
            flat[i] = orig
            fd_flat[i] = (f_plus - f_minus) / (2.0 * h)

        g = np.asarray(analytic[key], dtype=np.float64)
        num = float(np.linalg.norm(g - fd))
        den = max(float(np.linalg.norm(g)), float(np.linalg.norm(fd)), 1e-12)
        per_param[key] = num / den
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=worst, per_param=per_param, passed=worst <= tol)
