"""Reverse-mode automatic differentiation over dense float64 arrays.

The op set is deliberately small and sized for tiny decoder transformers.
Every op carries an explicit backward rule, and the whole engine can be
checked against central finite differences (`finite_difference_check`).

Broadcasting is restricted to row-wise vector addition / multiplication on
the last axis; every other shape change is an explicit op, which keeps the
backward rules auditable.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 array with optional gradient storage.

    Leaf tensors created with ``requires_grad=True`` get a zero-initialized
    ``grad`` buffer; ``backward`` accumulates into it additively, so a leaf
    that never reaches the loss keeps an all-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _output(data: np.ndarray, requires_grad: bool) -> Tensor:
    # Internal constructor for op outputs: no eager grad buffer.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of ops from one forward pass.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. ``backward`` may run once per tape.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.produced: set[int] = set()
        self.consumed = False
        self.bytes_recorded = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must nest"

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.entries.append(_Entry(out, inputs, backward))
        self.produced.add(id(out))
        self.bytes_recorded += out.data.nbytes


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    tape = _active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = _output(data, requires)
    if requires:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _finish(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a vector broadcast over rows."""
    if a.shape == b.shape:
        def backward(g):
            return (g, g)
        return _finish(a.data + b.data, (a, b), backward)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        d = b.shape[0]

        def backward(g):
            return (g, g.reshape(-1, d).sum(axis=0))

        return _finish(a.data + b.data, (a, b), backward)
    raise ValueError(f"add: incompatible shapes {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; the second operand may be a vector broadcast over rows."""
    if a.shape == b.shape:
        def backward(g):
            return (g * b.data, g * a.data)
        return _finish(a.data * b.data, (a, b), backward)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        d = b.shape[0]

        def backward(g):
            return (g * b.data, (g * a.data).reshape(-1, d).sum(axis=0))

        return _finish(a.data * b.data, (a, b), backward)
    raise ValueError(f"mul: incompatible shapes {a.shape} * {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _finish(a.data * c, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x), no tanh approximation."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _finish(data, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis; tolerates -inf entries used for masking."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax_rows: a row has no finite entry")
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _finish(p, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias.

    Uses epsilon 1e-5 inside the variance square root, so the pre-gain
    output variance is v/(v+eps) for row variance v.
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis of {a.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y = xc * inv
    data = y * gain.data + bias.data

    def backward(g):
        dy = g * gain.data
        mean_dy = dy.mean(axis=-1, keepdims=True)
        mean_dyy = (dy * y).mean(axis=-1, keepdims=True)
        ga = inv * (dy - mean_dy - y * mean_dyy)
        ggain = (g * y).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return (ga, ggain, gbias)

    return _finish(data, (a, gain, bias), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2D table by integer index (embedding lookup / row slice)."""
    if table.data.ndim != 2:
        raise ValueError(f"gather_rows: table must be 2D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows: ids must be 1D, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_rows: index {int(bad)} out of range [0, {n})")
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(data, (table,), backward)


def transpose(a: Tensor) -> Tensor:
    """2D transpose."""
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2D, got {a.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _finish(np.ascontiguousarray(a.data.T), (a,), backward)


def concat_last_dim(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ValueError("concat_last_dim: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ValueError(
                f"concat_last_dim: leading dims differ, {p.shape} vs {parts[0].shape}"
            )
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)
    data = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        return tuple(
            np.ascontiguousarray(g[..., offsets[i]:offsets[i + 1]])
            for i in range(len(parts))
        )

    return _finish(data, tuple(parts), backward)


def split_last_dim(a: Tensor, sizes) -> list[Tensor]:
    """Split the last axis into pieces; `sizes` is a part count or a width list."""
    d = a.shape[-1]
    if isinstance(sizes, int):
        if sizes <= 0 or d % sizes != 0:
            raise ValueError(f"split_last_dim: {sizes} parts do not divide width {d}")
        widths = [d // sizes] * sizes
    else:
        widths = list(sizes)
        if sum(widths) != d:
            raise ValueError(f"split_last_dim: sizes {widths} do not sum to width {d}")
    outs = []
    start = 0
    for w in widths:
        lo = start
        start += w

        def backward(g, lo=lo, w=w):
            ga = np.zeros_like(a.data)
            ga[..., lo:lo + w] = g
            return (ga,)

        outs.append(_finish(np.ascontiguousarray(a.data[..., lo:lo + w]), (a,), backward))
    return outs


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate 2D tensors along the row axis (batch reassembly)."""
    if not parts:
        raise ValueError("concat_rows: empty input list")
    w = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[-1] != w:
            raise ValueError(f"concat_rows: incompatible shapes {p.shape} vs {parts[0].shape}")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)
    data = np.concatenate([p.data for p in parts], axis=0)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _finish(data, tuple(parts), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    data = np.asarray(a.data.sum())

    def backward(g):
        return (np.full_like(a.data, float(g)),)

    return _finish(data, (a,), backward)


def cross_entropy_mean(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of target ids under row-wise softmax.

    `targets` holds one token id per logits row; rows where `ignore_mask` is
    True are excluded from the mean. Raises if every row is ignored.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_mean: logits must be 2D, got {logits.shape}")
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise ValueError(f"cross_entropy_mean: {n} logit rows but targets shape {tgt.shape}")
    if ignore_mask is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask, dtype=bool)
        if keep.shape != (n,):
            raise ValueError("cross_entropy_mean: ignore_mask length mismatch")
    if not keep.any():
        raise ValueError("cross_entropy_mean: empty loss (all positions ignored)")
    kept_tgt = tgt[keep]
    if kept_tgt.min() < 0 or kept_tgt.max() >= v:
        bad = kept_tgt[(kept_tgt < 0) | (kept_tgt >= v)][0]
        raise IndexError(f"cross_entropy_mean: target id {int(bad)} out of range [0, {v})")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    k = int(keep.sum())
    rows = np.nonzero(keep)[0]
    data = np.asarray(-logp[rows, kept_tgt].mean())

    def backward(g):
        gl = np.zeros_like(x)
        gl[rows] = np.exp(logp[rows])
        gl[rows, kept_tgt] -= 1.0
        gl[rows] *= float(g) / k
        return (gl,)

    return _finish(data, (logits,), backward)


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "gelu": gelu,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "gather_rows": gather_rows,
    "transpose": transpose,
    "scale": scale,
    "concat_last_dim": concat_last_dim,
    "split_last_dim": split_last_dim,
    "concat_rows": concat_rows,
    "sum_all": sum_all,
}


def forward_op(kind: str, *inputs, **kwargs):
    """Dispatch a primitive by name. See `_OP_TABLE` for the supported kinds."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate leaf gradients by replaying the tape in reverse.

    The loss must be a scalar produced on this tape. Gradients accumulate
    additively into each leaf's ``grad`` buffer (leaves are tensors that were
    consumed but never produced by the tape). A tape can be replayed once.
    """
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed; build a fresh tape")
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape.produced:
        raise ValueError("backward: loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, ig in zip(entry.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if id(t) in tape.produced:
                acc = grads.get(id(t))
                grads[id(t)] = ig if acc is None else acc + ig
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += ig


def value_of(f, point: Tensor) -> float:
    """Evaluate a tensor->scalar function outside any tape."""
    out = f(point)
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.shape != ():
        raise ValueError(f"expected scalar function output, got shape {val.shape}")
    if not np.isfinite(val):
        raise ValueError("function returned a non-finite value")
    return float(val)


def finite_difference_check(f, point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("finite_difference_check: epsilon must be positive")
    point.requires_grad = True
    point.zero_grad()
    with Tape() as tape:
        out = f(point)
    if out.data.shape != ():
        raise ValueError("finite_difference_check: f must return a scalar")
    if not np.isfinite(out.data):
        raise ValueError("finite_difference_check: f returned a non-finite value")
    backward(tape, out)
    analytic = point.grad.copy()

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = value_of(f, point)
        flat[i] = orig - epsilon
        fm = value_of(f, point)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
