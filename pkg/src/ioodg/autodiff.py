"""A small reverse-mode autodiff core over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires grad, the output remembers its parents and a closure that pushes
its gradient back to them. :meth:`Tensor.backward` walks the graph in
reverse creation order, which is a fixed topological order, so gradients
are bit-reproducible.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import CheckpointError, IoError, NonFinite, NotScalar, ShapeMismatch

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def branch_trace():
    """Collect the discrete choices ops make (masks, argmax picks, index sets).

    Two evaluations with equal traces ran through the same smooth piece of the
    function, so a finite difference between them is meaningful.
    """
    prev = getattr(_state, "trace", None)
    _state.trace = log = []
    try:
        yield log
    finally:
        _state.trace = prev


def note_branch(choice) -> None:
    """Record a discrete choice in the active :func:`branch_trace`, if any."""
    log = getattr(_state, "trace", None)
    if log is not None:
        arr = np.asarray(choice)
        log.append((arr.shape, arr.tobytes()))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "aux")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.op = op
        self.aux = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise NotScalar(f"backward needs a scalar loss, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFinite(f"{op} produced NaN or Inf")


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, False, (), None, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    note_branch(mask)

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _t(a)
    note_branch(a.data > 0)
    factor = np.where(a.data > 0, 1.0, slope)

    def bw(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), bw, "leaky_relu")


# ---------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` fused into one node."""
    x, w = _t(x), _t(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"linear: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"linear bias {b.shape} vs width {w.shape[1]}")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, bw, "linear")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a) -> Tensor:
    a = _t(a)

    def bw(g):
        return (g.T,)

    return _make(a.data.T, (a,), bw, "transpose")


# ------------------------------------------------------------- normalizations


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    b = labels.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].sum() / b

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------ reductions


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _t(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = _t(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def sq_diff_sum(a, b) -> Tensor:
    """``sum((a - b) ** 2)`` as a single node."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sq_diff_sum: {a.shape} vs {b.shape}")
    d = a.data - b.data

    def bw(g):
        gd = (2.0 * float(g)) * d
        return gd, -gd

    return _make(np.asarray((d * d).sum()), (a, b), bw, "sq_diff_sum")


def max_pool(a, axis: int = 0) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = _t(a)
    idx = np.argmax(a.data, axis=axis)
    note_branch(idx)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    res = _make(out, (a,), bw, "max_pool")
    res.aux = idx
    return res


# ------------------------------------------------------------------- indexing


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(out, tuple(ts), bw, "concat")


def gather(a, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate gradient."""
    a = _t(a)
    index = np.asarray(index, dtype=np.int64)
    note_branch(index)
    n = a.shape[0]

    def bw(g):
        if a.data.ndim == 1:
            return (np.bincount(index, weights=g, minlength=n).astype(np.float64),)
        return (K.segment_sum(np.ascontiguousarray(g), index, n),)

    return _make(a.data[index], (a,), bw, "gather")


def segment_softmax(e, seg, nseg: int) -> Tensor:
    """Softmax of a 1-D score vector within groups given by ``seg``."""
    e = _t(e)
    seg = np.asarray(seg, dtype=np.int64)
    note_branch(seg)
    w = K.segment_softmax(np.ascontiguousarray(e.data), seg, int(nseg))

    def bw(g):
        return (K.segment_softmax_grad(w, np.ascontiguousarray(g), seg, int(nseg)),)

    return _make(w, (e,), bw, "segment_softmax")


def segment_sum(x, seg, nseg: int) -> Tensor:
    """Sum rows of ``x`` into ``nseg`` buckets; the inverse of :func:`gather`."""
    x = _t(x)
    seg = np.asarray(seg, dtype=np.int64)
    note_branch(seg)
    out = K.segment_sum(np.ascontiguousarray(x.data), seg, int(nseg))

    def bw(g):
        return (g[seg],)

    return _make(out, (x,), bw, "segment_sum")


# -------------------------------------------------------------------- backward


def backward(root: Tensor, grad) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t._parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)
    grads = {root._id: np.asarray(grad, dtype=np.float64).reshape(root.shape)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        pgrads = t._backward(g)
        for p, pg in zip(t._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg


# -------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    worst_index: dict = field(default_factory=dict)
    nondiff: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.overall < self.tol

    @property
    def worst(self):
        if not self.max_rel_error:
            return None
        return max(self.max_rel_error, key=self.max_rel_error.get)


def rel_error(ga, gf, floor: float = 1e-8):
    return abs(ga - gf) / max(abs(ga), abs(gf), floor)


def gradient_check(f, at, h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``at`` is a Tensor or a mapping name -> Tensor; those leaves are perturbed
    in place and ``f`` must read them on every call. An element that fails the
    tolerance and whose +-h evaluations change a discrete choice (see
    :func:`branch_trace`) straddles a non-differentiable point; it is counted
    in ``nondiff`` rather than as an error. Gradients are compared relative to
    the larger magnitude, floored at the rounding noise of the difference
    quotient divided by ``tol``, below which relative error is meaningless.
    """
    params = at if isinstance(at, dict) else {"x": at}
    for p in params.values():
        p.grad = None
    with branch_trace() as base:
        loss = f()
    if loss.data.size != 1:
        raise NotScalar("gradient_check needs a scalar function")
    loss.backward()
    base = sorted(base)
    f0 = float(loss.data)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        worst, worst_i, kinks = 0.0, -1, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad(), branch_trace() as up:
                fp = float(f().data)
            flat[i] = orig - h
            with no_grad(), branch_trace() as down:
                fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            ga = float(analytic.reshape(-1)[i])
            # a few ulps of f, divided by the step, is what the quotient can resolve
            noise = 8 * float(np.finfo(float).eps) * max(abs(f0), abs(fp), abs(fm)) / (2 * h)
            err = rel_error(ga, fd, max(1e-8, noise / tol))
            if err >= tol and (sorted(up) != base or sorted(down) != base):
                kinks += 1
                continue
            if err > worst:
                worst, worst_i = err, i
        report.max_rel_error[name] = worst
        report.worst_index[name] = worst_i
        report.nondiff[name] = kinks
    return report


# ----------------------------------------------------------------- checkpoints

MAGIC = b"IOODG001"


def save_checkpoint(path, entries, config: dict | None = None) -> None:
    """Write named arrays as little-endian float32; optional JSON sidecar at ``path + '.json'``."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(buf))
        if config is not None:
            with open(str(path) + ".json", "w") as fh:
                json.dump(config, fh, indent=2, sort_keys=True)
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    try:
        pos = 8
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from exc
    return out


def load_sidecar(path) -> dict | None:
    try:
        with open(str(path) + ".json") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None
