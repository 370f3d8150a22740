"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on an explicitly activated :class:`Tape` in
execution order (which is a topological order), so the backward pass is a
single reverse sweep over the tape. Without an active tape every operation
is a plain numpy computation, which is the inference fast path.

Broadcasting is deliberately restricted to scalar-vs-tensor and
same-shape operands; anything richer (column scaling, row gathering,
masking) is its own primitive with a hand-written backward rule.
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """A numpy float64 array plus gradient bookkeeping.

    ``grad`` is lazily allocated the first time the backward sweep reaches
    the tensor; it always matches ``values`` in shape.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; inputs always precede their consumers.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        backward(loss, tape)
    """

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], Tensor, object]] = []

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        self.entries.append((inputs, output, rule))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every recorded tensor reachable from ``loss``.

    Gradients sum across fan-out. The tape is cleared afterward so a tape
    object can be reused for the next forward pass.
    """
    if loss.values.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {loss.values.shape}")
    loss.accumulate_grad(np.ones_like(loss.values))
    for inputs, output, rule in reversed(tape.entries):
        if output.grad is None:
            continue  # dead branch: nothing downstream consumed it
        rule(output.grad)
    tape.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(inputs: tuple[Tensor, ...], out_values: np.ndarray, rule) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_values, requires_grad=True)
        tape.record(inputs, out, rule)
        return out
    return Tensor(out_values)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-vs-tensor")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only the scalar case can disagree under our broadcasting rules
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_values = a.values @ b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.values.T)
        if b.requires_grad:
            b.accumulate_grad(a.values.T @ g)

    return _record((a, b), out_values, rule)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    out_values = a.values + b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    return _record((a, b), out_values, rule)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")
    out_values = a.values - b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.shape))

    return _record((a, b), out_values, rule)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    out_values = a.values * b.values

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.values, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.values, b.shape))

    return _record((a, b), out_values, rule)


def relu(x) -> Tensor:
    x = _coerce(x)
    out_values = np.maximum(x.values, 0.0)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.values > 0.0))

    return _record((x,), out_values, rule)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    v = x.values
    out_values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_values * (1.0 - out_values))

    return _record((x,), out_values, rule)


def exp(x) -> Tensor:
    x = _coerce(x)
    out_values = np.exp(x.values)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_values)

    return _record((x,), out_values, rule)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient flows only where the input was inside (lo, hi)."""
    x = _coerce(x)
    out_values = np.clip(x.values, lo, hi)

    def rule(g):
        if x.requires_grad:
            inside = (x.values > lo) & (x.values < hi)
            x.accumulate_grad(g * inside)

    return _record((x,), out_values, rule)


def sum_(x) -> Tensor:
    x = _coerce(x)
    out_values = np.asarray(x.values.sum())

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.values, float(g)))

    return _record((x,), out_values, rule)


def mean_(x) -> Tensor:
    x = _coerce(x)
    n = x.values.size
    out_values = np.asarray(x.values.mean())

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.values, float(g) / n))

    return _record((x,), out_values, rule)


def rowsum(x) -> Tensor:
    """Sum a 2-D tensor along its second axis, yielding one value per row."""
    x = _coerce(x)
    if x.values.ndim != 2:
        raise ValueError(f"rowsum: expected 2-D input, got shape {x.shape}")
    out_values = x.values.sum(axis=1)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.repeat(g[:, None], x.shape[1], axis=1))

    return _record((x,), out_values, rule)


def scale_columns(x, w) -> Tensor:
    """Multiply each column of a 2-D tensor by the matching entry of a vector."""
    x, w = _coerce(x), _coerce(w)
    if x.values.ndim != 2 or w.values.ndim != 1 or x.shape[1] != w.shape[0]:
        raise ValueError(f"scale_columns: incompatible shapes {x.shape} and {w.shape}")
    out_values = x.values * w.values[None, :]

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * w.values[None, :])
        if w.requires_grad:
            w.accumulate_grad((g * x.values).sum(axis=0))

    return _record((x, w), out_values, rule)


def gather_rows(x, idx) -> Tensor:
    """Select rows of a 2-D tensor by index, duplicates allowed."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.values.ndim != 2:
        raise ValueError(f"gather_rows: expected 2-D input, got shape {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out_values = x.values[idx]

    def rule(g):
        if x.requires_grad:
            buf = np.zeros_like(x.values)
            np.add.at(buf, idx, g)
            x.accumulate_grad(buf)

    return _record((x,), out_values, rule)


def mask_rows(x, token, idx) -> Tensor:
    """Replace the given rows of a 2-D tensor with a single (learnable) row vector."""
    x, token = _coerce(x), _coerce(token)
    idx = np.asarray(idx, dtype=np.intp)
    if x.values.ndim != 2 or token.values.ndim != 1 or token.shape[0] != x.shape[1]:
        raise ValueError(f"mask_rows: incompatible shapes {x.shape} and {token.shape}")
    out_values = x.values.copy()
    out_values[idx] = token.values

    def rule(g):
        if token.requires_grad and idx.size:
            token.accumulate_grad(g[idx].sum(axis=0))
        if x.requires_grad:
            gx = g.copy()
            gx[idx] = 0.0
            x.accumulate_grad(gx)

    return _record((x, token), out_values, rule)


def vstack(parts) -> Tensor:
    """Stack 2-D tensors of equal width along axis 0."""
    parts = [_coerce(p) for p in parts]
    widths = {p.shape[1] for p in parts if p.values.ndim == 2}
    if any(p.values.ndim != 2 for p in parts) or len(widths) > 1:
        raise ValueError(f"vstack: need 2-D parts of equal width, got {[p.shape for p in parts]}")
    out_values = np.vstack([p.values for p in parts])

    def rule(g):
        off = 0
        for p in parts:
            n = p.shape[0]
            if p.requires_grad:
                p.accumulate_grad(g[off:off + n])
            off += n

    return _record(tuple(parts), out_values, rule)


def concat(parts) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [_coerce(p) for p in parts]
    for p in parts:
        if p.values.ndim != 1:
            raise ValueError(f"concat: expected 1-D parts, got shape {p.shape}")
    out_values = np.concatenate([p.values for p in parts]) if parts else np.zeros(0)

    def rule(g):
        off = 0
        for p in parts:
            n = p.shape[0]
            if p.requires_grad:
                p.accumulate_grad(g[off:off + n])
            off += n

    return _record(tuple(parts), out_values, rule)


def bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Binary cross entropy on raw logits, stable at extreme values.

    Uses max(l,0) - l*t + log1p(exp(-|l|)) elementwise; targets must be 0/1.
    ``reduction="mean"`` gives a scalar, ``"none"`` the per-element losses.
    """
    logits = _coerce(logits)
    t = np.asarray(_coerce(targets).values)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits: shapes {logits.shape} and {t.shape} differ")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    if reduction not in ("mean", "none"):
        raise ValueError(f"bce_with_logits: unknown reduction {reduction!r}")
    lv = logits.values
    per = np.maximum(lv, 0.0) - lv * t + np.log1p(np.exp(-np.abs(lv)))
    if reduction == "none":
        def rule(g):
            if logits.requires_grad:
                s = np.where(lv >= 0, 1.0 / (1.0 + np.exp(-np.abs(lv))), np.exp(-np.abs(lv)) / (1.0 + np.exp(-np.abs(lv))))
                logits.accumulate_grad(g * (s - t))

        return _record((logits,), per, rule)

    n = per.size
    out_values = np.asarray(per.mean())

    def rule(g):
        if logits.requires_grad:
            s = np.where(lv >= 0, 1.0 / (1.0 + np.exp(-np.abs(lv))), np.exp(-np.abs(lv)) / (1.0 + np.exp(-np.abs(lv))))
            logits.accumulate_grad(float(g) / n * (s - t))

    return _record((logits,), out_values, rule)


def mse(x, xhat) -> Tensor:
    """Mean squared difference over all elements."""
    x, xhat = _coerce(x), _coerce(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"mse: shapes {x.shape} and {xhat.shape} differ")
    diff = xhat.values - x.values
    n = diff.size
    out_values = np.asarray((diff * diff).mean())

    def rule(g):
        scale = 2.0 * float(g) / n
        if xhat.requires_grad:
            xhat.accumulate_grad(scale * diff)
        if x.requires_grad:
            x.accumulate_grad(-scale * diff)

    return _record((x, xhat), out_values, rule)


def mse_rowwise(x, xhat) -> Tensor:
    """Per-row mean squared difference of two 2-D tensors."""
    x, xhat = _coerce(x), _coerce(xhat)
    if x.shape != xhat.shape or x.values.ndim != 2:
        raise ValueError(f"mse_rowwise: expected equal 2-D shapes, got {x.shape} and {xhat.shape}")
    diff = xhat.values - x.values
    d = x.shape[1]
    out_values = (diff * diff).mean(axis=1)

    def rule(g):
        scale = 2.0 / d * g[:, None]
        if xhat.requires_grad:
            xhat.accumulate_grad(scale * diff)
        if x.requires_grad:
            x.accumulate_grad(-scale * diff)

    return _record((x, xhat), out_values, rule)


def cosine_rowwise(x, xhat) -> Tensor:
    """Per-row 1 - cosine similarity, in [0, 2]; a zero-norm row counts as cosine 0."""
    x, xhat = _coerce(x), _coerce(xhat)
    if x.shape != xhat.shape or x.values.ndim != 2:
        raise ValueError(f"cosine_rowwise: expected equal 2-D shapes, got {x.shape} and {xhat.shape}")
    xv, hv = x.values, xhat.values
    nx = np.sqrt((xv * xv).sum(axis=1))
    nh = np.sqrt((hv * hv).sum(axis=1))
    ok = (nx > 0.0) & (nh > 0.0)
    denom = np.where(ok, nx * nh, 1.0)
    cos = np.where(ok, (xv * hv).sum(axis=1) / denom, 0.0)
    out_values = 1.0 - cos

    def rule(g):
        # d(1-cos)/dxhat = cos*xhat/|xhat|^2 - x/(|x||xhat|); zero rows get no gradient
        gm = (g * ok)[:, None]
        if xhat.requires_grad:
            xhat.accumulate_grad(gm * (cos[:, None] * hv / np.where(ok, nh * nh, 1.0)[:, None] - xv / denom[:, None]))
        if x.requires_grad:
            x.accumulate_grad(gm * (cos[:, None] * xv / np.where(ok, nx * nx, 1.0)[:, None] - hv / denom[:, None]))

    return _record((x, xhat), out_values, rule)


def cosine_embedding_loss(x, xhat) -> Tensor:
    """Mean of the per-row cosine losses."""
    return mean_(cosine_rowwise(x, xhat))
