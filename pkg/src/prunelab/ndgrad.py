"""Reverse-mode automatic differentiation over dense float64 arrays.

The primitive set is small and fixed; every op carries a hand-written
vector-Jacobian rule and is verified against central finite differences in
the test suite. Everything is 64-bit so the finite-difference checks are
tight. Broadcasting is restricted to a trailing-shape rule (a bias row or a
scalar against a batched operand); anything else is a shape error.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Array",
    "Tape",
    "TapeNode",
    "ShapeError",
    "AutodiffError",
    "no_grad",
    "mac_counter",
    "backward",
    "zero_grads",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "log",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "gelu",
    "silu",
    "layernorm",
    "embedding_lookup",
    "concat_rows",
    "slice_rows",
    "slice_cols",
    "transpose",
    "cross_entropy_rowwise",
    "causal_attention",
]

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))
_LN_EPS = 1e-5  # layernorm variance floor


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""


class AutodiffError(RuntimeError):
    """Backward pass cannot proceed (non-scalar loss, empty tape, ...)."""


class Array:
    """Dense float64 tensor that optionally participates in gradient taping.

    ``grad`` buffers accumulate additively across backward calls until
    ``zero_grads`` clears them. ``data`` is never mutated by a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: array of shape {self.data.shape} is not scalar")
        return float(self.data)

    def detach(self) -> "Array":
        return Array(self.data)

    def copy(self) -> "Array":
        out = Array(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.data.shape}{flag})"


class TapeNode:
    """One recorded operation: input/output references plus its VJP rule."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Array", ...], output: "Array",
                 vjp: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Topologically ordered list of operations reachable from a root array.

    Every node's inputs appear earlier in ``records`` than the node itself,
    so replaying the records in reverse order accumulates gradients
    additively from the root down to the leaves.
    """

    def __init__(self, records: list[TapeNode]):
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def trace(root: "Array") -> "Tape":
        if root.node is None:
            return Tape([])
        order: list[TapeNode] = []
        visited: set[int] = set()
        stack: list[tuple[TapeNode, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in visited:
                    stack.append((inp.node, False))
        return Tape(order)


_STATE = threading.local()


def _recording() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _recording()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class mac_counter:
    """Counts multiply-accumulate operations of matmul-like primitives.

    Used as an oracle against the analytic FLOPs formula: FLOPs = 2 * macs.
    """

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        self._prev = getattr(_STATE, "mac_counter", None)
        _STATE.mac_counter = self
        return self

    def __exit__(self, *exc):
        _STATE.mac_counter = self._prev
        return False


def _count_macs(n: int) -> None:
    mc = getattr(_STATE, "mac_counter", None)
    if mc is not None:
        mc.macs += int(n)


def _result(op: str, out_data: np.ndarray, inputs: tuple[Array, ...],
            vjp: Callable[[np.ndarray], tuple]) -> Array:
    out = Array(out_data)
    if _recording() and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, out, vjp)
    return out


def backward(loss: Array) -> None:
    """Fill grad buffers of every requires_grad array reachable from loss.

    Repeated calls accumulate; use ``zero_grads`` between steps. Raises if
    the loss is not scalar or records no operations (empty tape).
    """
    if loss.data.shape != ():
        raise AutodiffError(
            f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise AutodiffError("backward: empty tape (loss records no operations)")
    tape = Tape.trace(loss)
    flows: dict[Array, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
    for node in reversed(tape.records):
        g = flows.get(node.output)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            cur = flows.get(inp)
            flows[inp] = ig if cur is None else cur + ig
    for arr, g in flows.items():
        if not arr.requires_grad:
            continue
        g = np.asarray(g, dtype=np.float64)
        arr.grad = g.copy() if arr.grad is None else arr.grad + g


def zero_grads(arrays) -> None:
    for a in arrays:
        a.grad = None


def _trailing_axes(op: str, a: Array, b: Array) -> tuple[int, ...] | None:
    """Validate the trailing-broadcast rule; return axes to reduce b's grad over."""
    if a.shape == b.shape:
        return None
    lead = a.data.ndim - b.data.ndim
    if lead > 0 and a.shape[lead:] == b.shape:
        return tuple(range(lead))
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def matmul(a: Array, b: Array) -> Array:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", out, (a, b), vjp)


def add(a: Array, b: Array) -> Array:
    axes = _trailing_axes("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return g, (g if axes is None else g.sum(axis=axes))

    return _result("add", out, (a, b), vjp)


def sub(a: Array, b: Array) -> Array:
    axes = _trailing_axes("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return g, (-g if axes is None else -g.sum(axis=axes))

    return _result("sub", out, (a, b), vjp)


def mul(a: Array, b: Array) -> Array:
    axes = _trailing_axes("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        gb = g * ad
        return g * bd, (gb if axes is None else gb.sum(axis=axes))

    return _result("mul", out, (a, b), vjp)


def scale(a: Array, c: float) -> Array:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _result("scale", out, (a,), vjp)


def sum(a: Array) -> Array:  # noqa: A001 - numpy-style reduction name
    out = a.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result("sum", out, (a,), vjp)


def mean(a: Array) -> Array:
    n = a.data.size
    out = a.data.mean()

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _result("mean", out, (a,), vjp)


def log(a: Array) -> Array:
    ad = a.data
    out = np.log(ad)

    def vjp(g):
        return (g / ad,)

    return _result("log", out, (a,), vjp)


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_lastdim(a: Array) -> Array:
    s = _softmax(a.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax_lastdim", s, (a,), vjp)


def log_softmax_lastdim(a: Array) -> Array:
    ls = _log_softmax(a.data)
    p = np.exp(ls)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax_lastdim", ls, (a,), vjp)


def gelu(a: Array) -> Array:
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi_cdf + x * pdf),)

    return _result("gelu", out, (a,), vjp)


def silu(a: Array) -> Array:
    x = a.data
    sig = expit(x)
    out = x * sig

    def vjp(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _result("silu", out, (a,), vjp)


def layernorm(a: Array, gain: Array, bias: Array) -> Array:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: input {a.shape} needs gain/bias of shape ({d},), "
            f"got {gain.shape} and {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _result("layernorm", out, (a, gain, bias), vjp)


def embedding_lookup(table: Array, ids) -> Array:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got shape {idx.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result("embedding_lookup", out, (table,), vjp)


def concat_rows(*parts: Array) -> Array:
    if not parts:
        raise ShapeError("concat_rows: needs at least one operand")
    trail = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != parts[0].data.ndim or p.shape[1:] != trail:
            raise ShapeError(
                f"concat_rows: shapes {parts[0].shape} and {p.shape} do not conform")
    out = np.concatenate([p.data for p in parts], axis=0)
    counts = [p.shape[0] for p in parts]

    def vjp(g):
        grads = []
        off = 0
        for n in counts:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return _result("concat_rows", out, tuple(parts), vjp)


def slice_rows(a: Array, start: int, stop: int) -> Array:
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: range [{start}:{stop}] invalid for shape {a.shape}")
    out = a.data[start:stop].copy()

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _result("slice_rows", out, (a,), vjp)


def slice_cols(a: Array, start: int, stop: int) -> Array:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: input must be 2-D, got {a.shape}")
    n = a.shape[1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_cols: range [{start}:{stop}] invalid for shape {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _result("slice_cols", out, (a,), vjp)


def transpose(a: Array) -> Array:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: input must be 2-D, got {a.shape}")
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return _result("transpose", out, (a,), vjp)


def cross_entropy_rowwise(logits: Array, targets) -> Array:
    """Per-row cross entropy -log softmax(logits)[target], shape (rows,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rowwise: logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if tgt.shape != (rows,):
        raise ShapeError(
            f"cross_entropy_rowwise: shapes {logits.shape} and {tgt.shape} do not conform")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise ValueError(
            f"cross_entropy_rowwise: target id out of range for vocab {vocab}")
    ls = _log_softmax(logits.data)
    ar = np.arange(rows)
    out = -ls[ar, tgt]

    def vjp(g):
        gl = np.exp(ls) * g[:, None]
        gl[ar, tgt] -= g
        return (gl,)

    return _result("cross_entropy_rowwise", out, (logits,), vjp)


def causal_attention(q: Array, k: Array, v: Array, n_heads: int) -> Array:
    """Multi-head causal self-attention core on (T, heads*head_dim) operands.

    Equivalent to the per-head composition of slice_cols / matmul /
    softmax_lastdim primitives (asserted in tests); fused for speed.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise ShapeError(
            f"causal_attention: shapes {q.shape}, {k.shape}, {v.shape} do not conform")
    t, width = q.shape
    if n_heads < 1 or width % n_heads != 0:
        raise ShapeError(
            f"causal_attention: width {width} not divisible by {n_heads} heads")
    dh = width // n_heads
    sc = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(t, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(t, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(t, n_heads, dh).transpose(1, 0, 2)
    _count_macs(2 * n_heads * t * t * dh)
    scores = (qh @ kh.transpose(0, 2, 1)) * sc
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    probs = _softmax(scores + mask)
    out = (probs @ vh).transpose(1, 0, 2).reshape(t, width)

    def vjp(g):
        gh = g.reshape(t, n_heads, dh).transpose(1, 0, 2)
        dv = probs.transpose(0, 2, 1) @ gh
        dp = gh @ vh.transpose(0, 2, 1)
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
        dq = (ds @ kh) * sc
        dk = (ds.transpose(0, 2, 1) @ qh) * sc
        return (dq.transpose(1, 0, 2).reshape(t, width),
                dk.transpose(1, 0, 2).reshape(t, width),
                dv.transpose(1, 0, 2).reshape(t, width))

    return _result("causal_attention", out, (q, k, v), vjp)
