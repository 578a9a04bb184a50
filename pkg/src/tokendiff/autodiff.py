"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run gradient tape: while a Tape is active, every operation
appends a record; Tape.backward replays the records in exact reverse
execution order and writes gradients into the tensors flagged
requires_grad (and nowhere else).

Shapes are strict: no implicit broadcasting. Batch structure is expressed
with explicit ops (tile_axis, split_heads, ...), which keeps every
gradient rule local and finite-difference checkable.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_EPS_LOG = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    grad is populated only by Tape.backward and only when requires_grad
    is set; intermediate nodes keep their adjoints on the tape, not here.
    requires_grad may be toggled to freeze or unfreeze a parameter.
    """

    __slots__ = ("data", "_requires_grad", "grad", "_needs")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._needs = self._requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)
        self._needs = bool(flag)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager; independent tapes carry no shared mutable
    state, so separate evaluation jobs may run on separate tapes.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every requires_grad tensor.

        loss must be a scalar produced while this tape was active.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward")
        if not self._records:
            raise UsageError("backward on an empty tape")
        self._consumed = True

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            gout = adjoints.pop(id(rec.out), None)
            if gout is None:
                continue
            grads_in = rec.backward(gout)
            for tensor, g in zip(rec.inputs, grads_in):
                if g is None or not tensor._needs:
                    continue
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] += g
                else:
                    adjoints[key] = g
            if rec.out.requires_grad:
                _write_grad(rec.out, gout)
        # Leaf adjoints that never appeared as an op output.
        for rec in self._records:
            for tensor in rec.inputs:
                g = adjoints.pop(id(tensor), None)
                if g is not None and tensor.requires_grad:
                    _write_grad(tensor, g)
        if loss.requires_grad and id(loss) in adjoints:
            _write_grad(loss, adjoints[id(loss)])


def _write_grad(tensor: Tensor, g: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = g.copy()
    else:
        tensor.grad += g


def record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    """Attach an op record to the active tape, if any.

    Extension point: modules with bespoke differentiable ops (e.g. the
    posterior mixture) register through here.
    """
    stack = _tape_stack()
    needs = any(t._needs for t in inputs)
    if stack and needs:
        out._needs = True
        stack[-1]._records.append(_Record(out, inputs, backward))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _require_finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# forward operation family
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return (g if a._needs else None, g if b._needs else None)

    return record(out, (a, b), bw)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a (d,) vector to every row of a (..., d) tensor."""
    d = a.data.shape[-1]
    if v.data.shape != (d,):
        raise ShapeError(f"add_rowvec: vector {v.data.shape} vs rows of width {d}")
    out = Tensor(a.data + v.data)

    def bw(g):
        ga = g if a._needs else None
        gv = g.reshape(-1, d).sum(axis=0) if v._needs else None
        return (ga, gv)

    return record(out, (a, v), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        return (g * c,)

    return record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D @ 2D, batched 3D @ shared 2D, or batched 3D @ batched 3D."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd)

        def bw(g):
            ga = g @ bd.T if a._needs else None
            gb = ad.T @ g if b._needs else None
            return (ga, gb)

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd)

        def bw(g):
            ga = g @ bd.T if a._needs else None
            gb = np.einsum("bnm,bnk->mk", ad, g) if b._needs else None
            return (ga, gb)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd)

        def bw(g):
            ga = g @ bd.transpose(0, 2, 1) if a._needs else None
            gb = ad.transpose(0, 2, 1) @ g if b._needs else None
            return (ga, gb)

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    return record(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))

    def bw(g):
        return (g * mask,)

    return record(out, (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return (g.reshape(old),)

    return record(out, (a,), bw)


def tile_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a length-1 axis n times; backward sums it back."""
    if a.data.shape[axis] != 1:
        raise ShapeError(f"tile_axis: axis {axis} of {a.data.shape} is not 1")
    reps = [1] * a.data.ndim
    reps[axis] = n
    out = Tensor(np.tile(a.data, reps))

    def bw(g):
        return (g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bw)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    sa, sb = list(a.data.shape), list(b.data.shape)
    axis = axis % len(sa)
    sa[axis] = sb[axis] = 0
    if sa != sb or a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: shapes {a.data.shape} and {b.data.shape} on axis {axis}")
    na = a.data.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def bw(g):
        ga, gb = np.split(g, [na], axis=axis)
        return (ga if a._needs else None, gb if b._needs else None)

    return record(out, (a, b), bw)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last2: rank-{a.data.ndim} input")
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return record(out, (a,), bw)


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """(B, L, d) -> (B*h, L, d/h) so heads ride the leading batch axis."""
    B, L, d = a.data.shape
    if d % n_heads != 0:
        raise ShapeError(f"split_heads: width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    out = Tensor(
        a.data.reshape(B, L, n_heads, dk).transpose(0, 2, 1, 3).reshape(B * n_heads, L, dk)
    )

    def bw(g):
        return (g.reshape(B, n_heads, L, dk).transpose(0, 2, 1, 3).reshape(B, L, d),)

    return record(out, (a,), bw)


def merge_heads(a: Tensor, n_heads: int) -> Tensor:
    """Inverse of split_heads: (B*h, L, dk) -> (B, L, h*dk)."""
    Bh, L, dk = a.data.shape
    if Bh % n_heads != 0:
        raise ShapeError(f"merge_heads: leading dim {Bh} not divisible by {n_heads}")
    B = Bh // n_heads
    out = Tensor(a.data.reshape(B, n_heads, L, dk).transpose(0, 2, 1, 3).reshape(B, L, n_heads * dk))

    def bw(g):
        return (g.reshape(B, L, n_heads, dk).transpose(0, 2, 1, 3).reshape(Bh, L, dk),)

    return record(out, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    _require_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return ((g - dot) * out_data,)

    return record(out, (a,), bw)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} vs width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        gx = None
        if x._needs:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain._needs else None
        gbias = g.sum(axis=lead) if bias._needs else None
        return (gx, ggain, gbias)

    return record(out, (x, gain, bias), bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Look up integer indices in a (V, d) table -> idx.shape + (d,)."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise UsageError(f"embedding: integer indices required, got {idx.dtype}")
    V = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise UsageError(f"embedding: index out of range for table of {V} rows")
    out = Tensor(table.data[idx])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return record(out, (table,), bw)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per row: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather_last: idx {idx.shape} vs data {a.data.shape}")
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    out = Tensor(picked)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return record(out, (a,), bw)


def cross_entropy(probs: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood -log p[idx] over the last axis."""
    _require_finite("cross_entropy", probs.data)
    if (probs.data < 0).any():
        raise UsageError("cross_entropy: negative probabilities")
    idx = np.asarray(idx)
    if idx.shape != probs.data.shape[:-1]:
        raise ShapeError(f"cross_entropy: idx {idx.shape} vs probs {probs.data.shape}")
    picked = np.take_along_axis(probs.data, idx[..., None], axis=-1)[..., 0]
    clipped = np.maximum(picked, _EPS_LOG)
    out = Tensor(-np.log(clipped))

    def bw(g):
        gp = np.zeros_like(probs.data)
        contrib = np.where(picked > _EPS_LOG, -g / clipped, 0.0)
        np.put_along_axis(gp, idx[..., None], contrib[..., None], axis=-1)
        return (gp,)

    return record(out, (probs,), bw)


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) over the last axis with q clamped at 1e-12; 0*log 0 := 0."""
    _require_same_shape("kl_div", p, q)
    _require_finite("kl_div", p.data, q.data)
    if (p.data < 0).any() or (q.data < 0).any():
        raise UsageError("kl_div: negative entries")
    qc = np.maximum(q.data, _EPS_LOG)
    pc = np.maximum(p.data, _EPS_LOG)
    terms = np.where(p.data > 0.0, p.data * (np.log(pc) - np.log(qc)), 0.0)
    out = Tensor(terms.sum(axis=-1))

    def bw(g):
        gq = None
        if q._needs:
            gq = np.where(q.data > _EPS_LOG, -p.data / qc, 0.0) * g[..., None]
        gp = None
        if p._needs:
            gp = (np.log(pc) - np.log(qc) + 1.0) * g[..., None]
        return (gp, gq)

    return record(out, (p, q), bw)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.data.shape
    out = Tensor(a.data.sum(axis=axis))

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = Tensor(a.data.sum())

    def bw(g):
        return (np.full(shape, float(g)),)

    return record(out, (a,), bw)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar dot product with a constant weight vector."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs data {a.data.shape}")
    out = Tensor((a.data * w).sum())

    def bw(g):
        return (w * float(g),)

    return record(out, (a,), bw)


def clamp_max(a: Tensor, limit: float) -> Tensor:
    """min(a, limit) with zero gradient past the limit."""
    mask = a.data <= limit
    out = Tensor(np.where(mask, a.data, limit))

    def bw(g):
        return (g * mask,)

    return record(out, (a,), bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    """Result of comparing tape gradients against central differences."""

    max_rel_err: float
    mean_rel_err: float
    n_params: int
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> FiniteDiffReport:
    """Check d f / d p against central finite differences for every scalar.

    f must be deterministic given the current parameter values (verified
    by evaluating it twice) and return a scalar Tensor.
    """
    if step <= 0:
        raise UsageError("finite_diff_check: step must be positive")
    y0 = f().item()
    if f().item() != y0:
        raise UsageError("finite_diff_check: f is not deterministic")

    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)

    per_param = {}
    errs = []
    for name, p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            y_plus = f().item()
            flat[i] = orig - step
            y_minus = f().item()
            flat[i] = orig
            fd = (y_plus - y_minus) / (2.0 * step)
            err = _rel_err(float(gflat[i]), fd)
            errs.append(err)
            worst = max(worst, err)
        per_param[name] = worst
    n = sum(p.data.size for _, p in params)
    return FiniteDiffReport(
        max_rel_err=max(errs) if errs else 0.0,
        mean_rel_err=float(np.mean(errs)) if errs else 0.0,
        n_params=n,
        per_param=per_param,
        tol=tol,
    )
