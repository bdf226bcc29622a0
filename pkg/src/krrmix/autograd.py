"""Minimal reverse-mode differentiation over numpy arrays.

Eager define-by-run: every primitive computes its value immediately and, if
any input is a Node, appends one entry to that Node's Tape. backward()
replays the entries in reverse, accumulating an array gradient per node id.

Calling a primitive on plain ndarrays (no Node anywhere) skips recording and
returns a plain ndarray, so the exact same forward code doubles as the
inference path and as the function handed to the finite-difference checker.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from . import linalg
from .errors import NonScalarLoss, ShapeMismatch, TargetOutOfRange

# node id -> gradient array, one entry per reachable node
GradMap = Dict[int, np.ndarray]


class Node:
    """One value in a recorded computation; owned by a single Tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __neg__(self):
        return record("smul", [self], c=-1.0)

    def __sub__(self, other):
        return record("add", [self, record("smul", [other], c=-1.0)])

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive applications (single-writer)."""

    def __init__(self):
        self.entries: list[tuple] = []  # (op, input_ids, out_id, ctx)
        self._next_id = 0

    def _new_node(self, value) -> Node:
        node = Node(self, self._next_id, np.asarray(value))
        self._next_id += 1
        return node

    def leaf(self, value) -> Node:
        """Wrap an array as a differentiable leaf (no tape entry)."""
        return self._new_node(value)

    def constant(self, value) -> Node:
        """Wrap an array that should receive no gradient."""
        node = self._new_node(value)
        node.id = -1  # sentinel: backward skips it
        return node


# op name -> forward(*values, **kw) -> (out_value, ctx)
FORWARD: Dict[str, Callable] = {}
# op name -> backward(ctx, grad_out) -> tuple of per-input grads (None = no grad)
BACKWARD: Dict[str, Callable] = {}


def _primitive(name: str):
    def wrap(fn):
        if name in FORWARD:
            raise ValueError(f"primitive {name!r} already registered")
        FORWARD[name] = fn
        return fn

    return wrap


def _backward_rule(name: str):
    def wrap(fn):
        if name in BACKWARD:
            raise ValueError(f"backward for {name!r} already registered")
        BACKWARD[name] = fn
        return fn

    return wrap


def record(primitive: str, inputs: Sequence, **kw):
    """Apply a primitive; returns a Node if any input is a Node, else ndarray."""
    if primitive not in FORWARD:
        raise KeyError(f"unknown primitive {primitive!r}")
    tape = None
    for x in inputs:
        if isinstance(x, Node):
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs come from different tapes")
            tape = x.tape
    values = [x.value if isinstance(x, Node) else np.asarray(x) for x in inputs]
    out_value, ctx = FORWARD[primitive](*values, **kw)
    if tape is None:
        return out_value
    out = tape._new_node(out_value)
    ids = tuple(x.id if isinstance(x, Node) else -1 for x in inputs)
    tape.entries.append((primitive, ids, out.id, ctx))
    return out


def backward(tape: Tape, loss: Node) -> GradMap:
    """Gradients of a scalar loss node for every reachable node on the tape."""
    if not isinstance(loss, Node) or loss.value.size != 1:
        raise NonScalarLoss("backward expects a scalar-valued Node")
    grads: GradMap = {loss.id: np.ones_like(loss.value)}
    for op, input_ids, out_id, ctx in reversed(tape.entries):
        g = grads.get(out_id)
        if g is None:
            continue
        for iid, ig in zip(input_ids, BACKWARD[op](ctx, g)):
            if iid < 0 or ig is None:
                continue
            acc = grads.get(iid)
            grads[iid] = ig if acc is None else acc + ig
    return grads


def finite_difference_check(f, params: Dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between taped gradients of f and central differences.

    f maps a dict of arrays (or Nodes) to a scalar; it is evaluated once under
    a tape for the analytic gradients and 2 * n_elements times on perturbed
    plain arrays for the numeric ones. Relative error for one element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    tape = Tape()
    nodes = {k: tape.leaf(v) for k, v in params.items()}
    out = f(nodes)
    grads = backward(tape, out)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    max_rel = 0.0
    for name, arr in work.items():
        analytic = grads.get(nodes[name].id)
        if analytic is None:
            analytic = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = float(f(work))
            arr[idx] = orig - eps
            fm = float(f(work))
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel


# ---------------------------------------------------------------------------
# primitive definitions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape an operand had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@_primitive("add")
def _add_fwd(a, b):
    try:
        out = a + b
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc
    return out, (a.shape, b.shape)


@_backward_rule("add")
def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


@_primitive("mul")
def _mul_fwd(a, b):
    try:
        out = a * b
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc
    return out, (a, b)


@_backward_rule("mul")
def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_primitive("smul")
def _smul_fwd(a, c):
    return a * c, c


@_backward_rule("smul")
def _smul_bwd(ctx, g):
    return (g * ctx,)


@_primitive("matmul")
def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


@_backward_rule("matmul")
def _matmul_bwd(ctx, g):
    a, b = ctx
    ga = _unbroadcast(g @ _swap(b), a.shape)
    gb = _unbroadcast(_swap(a) @ g, b.shape)
    return ga, gb


@_primitive("transpose")
def _transpose_fwd(a):
    return _swap(a), None


@_backward_rule("transpose")
def _transpose_bwd(ctx, g):
    return (_swap(g),)


@_primitive("permute")
def _permute_fwd(a, axes):
    return np.transpose(a, axes), tuple(axes)


@_backward_rule("permute")
def _permute_bwd(ctx, g):
    inverse = np.argsort(ctx)
    return (np.transpose(g, inverse),)


@_primitive("reshape")
def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


@_backward_rule("reshape")
def _reshape_bwd(ctx, g):
    return (g.reshape(ctx),)


@_primitive("reduce_sum")
def _reduce_sum_fwd(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


@_backward_rule("reduce_sum")
def _reduce_sum_bwd(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


@_primitive("sigmoid")
def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out, out


@_backward_rule("sigmoid")
def _sigmoid_bwd(ctx, g):
    s = ctx
    return (g * s * (1.0 - s),)


@_primitive("exp")
def _exp_fwd(a):
    out = np.exp(a)
    return out, out


@_backward_rule("exp")
def _exp_bwd(ctx, g):
    return (g * ctx,)


@_primitive("softplus")
def _softplus_fwd(a):
    out = np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)
    return out, a


@_backward_rule("softplus")
def _softplus_bwd(ctx, g):
    s, _ = _sigmoid_fwd(ctx)
    return (g * s,)


_GELU_C0 = np.sqrt(2.0 / np.pi)
_GELU_C1 = 0.044715


@_primitive("gelu")
def _gelu_fwd(a):
    t = np.tanh(_GELU_C0 * (a + _GELU_C1 * a**3))
    return 0.5 * a * (1.0 + t), (a, t)


@_backward_rule("gelu")
def _gelu_bwd(ctx, g):
    a, t = ctx
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * a * a)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)


@_primitive("layer_norm")
def _layer_norm_fwd(a, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


@_backward_rule("layer_norm")
def _layer_norm_bwd(ctx, g):
    y, inv = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gym),)


@_primitive("softmax_masked")
def _softmax_masked_fwd(scores, mask=None):
    s = linalg.masked_softmax(scores, mask)
    return s, s


@_backward_rule("softmax_masked")
def _softmax_masked_bwd(ctx, g):
    s = ctx
    inner = np.sum(g * s, axis=-1, keepdims=True)
    return (s * (g - inner),)


@_primitive("l2_normalize_rows")
def _l2norm_fwd(a):
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    denom = np.maximum(norms, linalg.NORM_FLOOR)
    y = a / denom
    return y, (y, denom)


@_backward_rule("l2_normalize_rows")
def _l2norm_bwd(ctx, g):
    y, denom = ctx
    inner = np.sum(y * g, axis=-1, keepdims=True)
    return ((g - y * inner) / denom,)


@_primitive("solve_general")
def _solve_general_fwd(a, b):
    x = linalg.solve_general(a, b)
    return x, (a, x)


@_backward_rule("solve_general")
def _solve_general_bwd(ctx, g):
    a, x = ctx
    gb = linalg.solve_general(_swap(a), g)
    ga = -(gb @ _swap(x))
    return ga, gb


@_primitive("solve_lower_triangular")
def _solve_tri_fwd(l, b):
    x = linalg.solve_lower_triangular(l, b)
    return x, (l, x)


@_backward_rule("solve_lower_triangular")
def _solve_tri_bwd(ctx, g):
    l, x = ctx
    gb = linalg.solve_upper_triangular(_swap(l), g)
    # strictly-upper entries of L are structurally zero: no gradient there
    ga = np.tril(-(gb @ _swap(x)))
    return ga, gb


@_primitive("gather_rows")
def _gather_rows_fwd(table, ids):
    ids = ids.astype(np.int64, copy=False)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise TargetOutOfRange(f"row ids outside [0, {table.shape[0]})")
    return table[ids], (table.shape, table.dtype, ids)


@_backward_rule("gather_rows")
def _gather_rows_bwd(ctx, g):
    shape, dtype, ids = ctx
    gt = np.zeros(shape, dtype=dtype)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
    return gt, None


@_primitive("cross_entropy")
def _cross_entropy_fwd(logits, targets, ignore_index=-1):
    t = targets.astype(np.int64, copy=False).reshape(-1)
    z = logits.reshape(-1, logits.shape[-1])
    valid = t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= z.shape[-1])):
        raise TargetOutOfRange(f"targets outside [0, {z.shape[-1]})")
    count = int(valid.sum())
    if count == 0:
        raise TargetOutOfRange("all targets are ignored")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / denom
    logp = (z - m) - np.log(denom)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, t[rows]].sum() / count
    loss = np.asarray(loss, dtype=logits.dtype)
    return loss, (probs, rows, t, count, logits.shape)


@_backward_rule("cross_entropy")
def _cross_entropy_bwd(ctx, g):
    probs, rows, t, count, shape = ctx
    gl = np.zeros_like(probs)
    gl[rows] = probs[rows]
    gl[rows, t[rows]] -= 1.0
    gl *= np.asarray(g).reshape(()) / count
    return gl.reshape(shape), None


@_primitive("slice_axis")
def _slice_axis_fwd(a, axis, start, stop):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return a[tuple(sl)], (a.shape, axis, start, stop)


@_backward_rule("slice_axis")
def _slice_axis_bwd(ctx, g):
    shape, axis, start, stop = ctx
    out = np.zeros(shape, dtype=g.dtype)
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(start, stop)
    out[tuple(sl)] = g
    return (out,)


@_primitive("concat")
def _concat_fwd(*parts, axis=-1):
    return np.concatenate(parts, axis=axis), (axis, [p.shape[axis] for p in parts])


@_backward_rule("concat")
def _concat_bwd(ctx, g):
    axis, sizes = ctx
    splits = np.cumsum(sizes[:-1])
    return tuple(np.split(g, splits, axis=axis))


@_primitive("rope")
def _rope_fwd(x, cos=None, sin=None):
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out, (cos, sin)


@_backward_rule("rope")
def _rope_bwd(ctx, g):
    cos, sin = ctx
    ge = g[..., 0::2]
    go = g[..., 1::2]
    out = np.empty_like(g)
    # transpose of a rotation is the rotation by the negated angle
    out[..., 0::2] = ge * cos + go * sin
    out[..., 1::2] = -ge * sin + go * cos
    return (out,)


# ---------------------------------------------------------------------------
# thin call-style wrappers (work on Nodes or plain arrays alike)
# ---------------------------------------------------------------------------


def add(a, b):
    return record("add", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def smul(a, c: float):
    return record("smul", [a], c=float(c))


def matmul(a, b):
    return record("matmul", [a, b])


def transpose(a):
    return record("transpose", [a])


def permute(a, axes):
    return record("permute", [a], axes=tuple(axes))


def reshape(a, shape):
    return record("reshape", [a], shape=tuple(shape))


def reduce_sum(a, axis=None, keepdims=False):
    return record("reduce_sum", [a], axis=axis, keepdims=keepdims)


def sigmoid(a):
    return record("sigmoid", [a])


def exp(a):
    return record("exp", [a])


def softplus(a):
    return record("softplus", [a])


def gelu(a):
    return record("gelu", [a])


def layer_norm(a, eps: float = 1e-5):
    return record("layer_norm", [a], eps=eps)


def softmax_masked(scores, mask=None):
    return record("softmax_masked", [scores], mask=mask)


def l2_normalize_rows(a):
    return record("l2_normalize_rows", [a])


def solve_general(a, b):
    return record("solve_general", [a, b])


def solve_lower_triangular(l, b):
    return record("solve_lower_triangular", [l, b])


def gather_rows(table, ids):
    return record("gather_rows", [table, ids])


def cross_entropy(logits, targets, ignore_index: int = -1):
    return record("cross_entropy", [logits, targets], ignore_index=ignore_index)


def slice_axis(a, axis: int, start: int, stop: int):
    return record("slice_axis", [a], axis=axis, start=start, stop=stop)


def concat(parts, axis: int = -1):
    return record("concat", list(parts), axis=axis)


def rope_rotate(x, cos, sin):
    return record("rope", [x], cos=cos, sin=sin)
