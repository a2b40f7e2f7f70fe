"""A small eager reverse-mode autodiff engine over numpy arrays.

Each primitive computes its forward value immediately and records a closure
that maps the output gradient to input gradients. Nodes carry a monotonically
increasing creation index, so walking the reachable nodes in decreasing index
order replays the tape in exact reverse execution order.

Only the operations needed by the encoder, the masked-prediction head and the
transducer are provided.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from . import _kernels

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


@contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._id = next(_counter)

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
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
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {t.data.shape}")
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a, s):
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return _result(a.data * a.data.dtype.type(s), (a,), bw, "scalar_mul")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _result(out, (a,), bw, "exp")


def log(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), bw, "log")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def bw(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _result(out, (a,), bw, "swish")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def bw(g):
        _accumulate(a, g * pos)

    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), bw, "relu")


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b`` (cond is a constant boolean array)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"where: incompatible {cond.shape}, {a.shape}, {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(cond, g, 0), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(cond, 0, g), b.shape))

    out = np.where(cond, a.data, b.data)
    out = np.broadcast_to(out, shape).astype(np.result_type(a.data, b.data))
    return _result(out, (a, b), bw, "where")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), bw, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def slice_(a, index):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(np.array(a.data[index]), (a,), bw, "slice")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _result(out, tensors, bw, "concat")


def masked_select(a, mask):
    """Rows of ``a`` (leading dims = mask.shape) where mask is true -> (N, ...)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if a.shape[: mask.ndim] != mask.shape:
        raise ShapeError(f"masked_select: mask {mask.shape} vs tensor {a.shape}")

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[mask] = g
        _accumulate(a, full)

    return _result(a.data[mask], (a,), bw, "masked_select")


def embedding_lookup(weight, ids):
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for {weight.shape[0]} rows")

    def bw(g):
        full = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _result(weight.data[ids], (weight,), bw, "embedding_lookup")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(sum_(a, axis, keepdims), 1.0 / float(n))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """x @ weight + bias, weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}, beta {beta.shape} for {x.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(x.dtype)
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = (g * gamma.data).astype(np.float64)
            xh = xhat.astype(np.float64)
            d = x.shape[-1]
            dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xh * (gx * xh).sum(-1, keepdims=True))
            _accumulate(x, dx)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x, axis=-1, mask=None):
    """Softmax; entries where ``mask`` is false get probability exactly 0."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / s).astype(x.dtype)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64)
        _accumulate(x, out * (g - inner))

    return _result(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.dtype)

    def bw(g):
        gs = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        _accumulate(x, g - np.exp(out) * gs)

    return _result(out, (x,), bw, "log_softmax")


def cross_entropy(logits, class_ids, reduction="mean"):
    """Cross-entropy of (N, C) logits against integer targets.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"``.
    """
    logits = as_tensor(logits)
    ids = np.asarray(class_ids, dtype=np.int64)
    if logits.ndim != 2 or ids.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {ids.shape}")
    C = logits.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= C):
        raise ShapeError(f"cross_entropy: target out of range for {C} classes")
    xd = logits.data.astype(np.float64)
    m = xd.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(xd - m).sum(axis=1))
    rows = np.arange(len(ids))
    per = lse - xd[rows, ids]
    n = max(len(ids), 1)
    if reduction == "mean":
        out = np.asarray(per.sum() / n)
    elif reduction == "sum":
        out = np.asarray(per.sum())
    elif reduction == "none":
        out = per
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(xd - lse[:, None])
        p[rows, ids] -= 1.0
        if reduction == "mean":
            p *= float(g) / n
        elif reduction == "sum":
            p *= float(g)
        else:
            p *= g[:, None]
        _accumulate(logits, p)

    return _result(out.astype(logits.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# temporal ops over (B, T, D)
# ---------------------------------------------------------------------------


def conv1d(x, weight, bias=None, stride=1, pad_left=0, pad_right=0):
    """Temporal convolution.

    x: (B, T, C_in); weight: (C_out, C_in, K). Output length is
    ``(T + pad_left + pad_right - K) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, T, C_in = x.shape
    C_out, C_in_w, K = weight.shape
    if C_in != C_in_w:
        raise ShapeError(f"conv1d: input channels {C_in} vs weight {weight.shape}")
    T_pad = T + pad_left + pad_right
    if T_pad < K:
        raise ShapeError(f"conv1d: input length {T} too short for kernel {K}")
    T_out = (T_pad - K) // stride + 1
    xp = np.zeros((B, T_pad, C_in), dtype=x.dtype)
    xp[:, pad_left : pad_left + T] = x.data
    idx = np.arange(T_out)[:, None] * stride + np.arange(K)[None, :]  # (T_out, K)
    cols = xp[:, idx, :]  # (B, T_out, K, C_in)
    w2 = weight.data.transpose(2, 1, 0).reshape(K * C_in, C_out)
    out = cols.reshape(B, T_out, K * C_in) @ w2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        if weight.requires_grad:
            gw = cols.reshape(-1, K * C_in).T @ g.reshape(-1, C_out)
            _accumulate(weight, gw.reshape(K, C_in, C_out).transpose(2, 1, 0))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, C_out).sum(axis=0))
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(B, T_out, K, C_in)
            gxp = np.zeros_like(xp)
            for k in range(K):
                np.add.at(gxp, (slice(None), idx[:, k]), gcols[:, :, k])
            _accumulate(x, gxp[:, pad_left : pad_left + T])

    return _result(out, parents, bw, "conv1d")


def _group_counts(T, k, lengths, B):
    """Number of valid frames in each length-k group, (B, ceil(T/k))."""
    n_groups = -(-T // k)
    starts = np.arange(n_groups) * k
    if lengths is None:
        lengths = np.full(B, T)
    lengths = np.asarray(lengths)
    return np.clip(lengths[:, None] - starts[None, :], 0, k)


def avg_downsample(x, k, lengths=None):
    """Average non-overlapping groups of ``k`` frames along time.

    Output length is ceil(T / k). With ``lengths`` given, frames at or beyond
    each item's length are excluded from the averages, so padding never leaks
    into valid groups.
    """
    x = as_tensor(x)
    B, T, D = x.shape
    if k == 1:
        return x
    n_groups = -(-T // k)
    valid = np.ones((B, T), dtype=bool)
    if lengths is not None:
        valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    xp = np.zeros((B, n_groups * k, D), dtype=np.float64)
    xp[:, :T] = np.where(valid[..., None], x.data, 0)
    counts = _group_counts(T, k, lengths, B).astype(np.float64)
    denom = np.maximum(counts, 1.0)[..., None]
    out = (xp.reshape(B, n_groups, k, D).sum(axis=2) / denom).astype(x.dtype)

    def bw(g):
        gg = np.repeat(g / denom, k, axis=1)[:, :T]
        _accumulate(x, np.where(valid[..., None], gg, 0))

    return _result(out, (x,), bw, "avg_downsample")


def nearest_upsample(x, k, length=None):
    """Repeat each frame ``k`` times along time, truncated to ``length``."""
    x = as_tensor(x)
    B, T, D = x.shape
    if length is None:
        length = T * k
    if length > T * k:
        raise ShapeError(f"nearest_upsample: {T}x{k} frames cannot cover {length}")
    if k == 1 and length == T:
        return x

    def bw(g):
        gp = np.zeros((B, T * k, D), dtype=g.dtype)
        gp[:, :length] = g
        _accumulate(x, gp.reshape(B, T, k, D).sum(axis=2))

    return _result(np.repeat(x.data, k, axis=1)[:, :length], (x,), bw, "nearest_upsample")


# ---------------------------------------------------------------------------
# transducer lattice
# ---------------------------------------------------------------------------


def rnnt_loss(log_probs, labels, t_lens, u_lens):
    """Per-item -log P(y|x) of a padded batch of transducer lattices.

    log_probs: (B, T, U+1, V+1) log-softmax outputs with blank at index 0.
    labels: (B, U) integer targets (padding ignored beyond u_lens).
    """
    log_probs = as_tensor(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    B, T, U1, V1 = log_probs.shape
    if labels.shape != (B, U1 - 1):
        raise ShapeError(f"rnnt_loss: labels {labels.shape} for lattice {log_probs.shape}")
    t_lens = np.asarray(t_lens, dtype=np.int64)
    u_lens = np.asarray(u_lens, dtype=np.int64)
    for b in range(B):
        lab = labels[b, : u_lens[b]]
        if lab.size and (lab.min() < 1 or lab.max() >= V1):
            raise ValueError("rnnt_loss: labels must lie in [1, V]")
    lp = log_probs.data
    blank = lp[..., 0]
    safe = np.clip(labels, 0, V1 - 1)
    emit = np.take_along_axis(lp[:, :, :-1, :], safe[:, None, :, None], axis=3)[..., 0]
    losses, g_blank, g_emit = _kernels.rnnt_lattice(blank, emit, t_lens, u_lens)

    def bw(g):
        g = np.asarray(g, dtype=np.float64).reshape(B)
        full = np.zeros(lp.shape, dtype=np.float64)
        emit_part = np.zeros((B, T, U1 - 1, V1))
        idx = np.broadcast_to(safe[:, None, :, None], (B, T, U1 - 1, 1))
        np.put_along_axis(emit_part, idx, (g_emit * g[:, None, None])[..., None], axis=3)
        full[:, :, :-1, :] = emit_part
        full[..., 0] += g_blank * g[:, None, None]
        _accumulate(log_probs, full)

    return _result(losses.astype(log_probs.dtype), (log_probs,), bw, "rnnt_loss")


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def backward(root):
    """Populate ``.grad`` of every requires_grad leaf reachable from ``root``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in nodes:
            continue
        nodes[n._id] = n
        stack.extend(p for p in n._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda n: n._id, reverse=True)
    root.grad = np.ones_like(root.data)
    for n in order:
        if n._backward is None or n.grad is None:
            continue
        n._backward(n.grad)
        n.grad = None  # intermediate grads are not kept


def grad_check(f, params, eps=1e-4, max_elems=None, rng=None, per="element", fd_dtype=None):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` is a list of leaf tensors that ``f`` closes over; they are
    perturbed in place and restored. Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over checked coordinates. With
    ``per="tensor"`` the error is taken over each parameter's gradient vector
    instead (norms in place of absolute values), which is the meaningful
    measure in single precision where near-zero entries are pure rounding.
    With ``max_elems`` set, at most that many coordinates per tensor are sampled.
    ``fd_dtype`` re-casts the parameters before differencing, so single
    precision analytic gradients can be judged against a float64 reference.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    saved = [p.data for p in params]
    if fd_dtype is not None:
        for p in params:
            p.data = p.data.astype(fd_dtype)
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                coords = rng.choice(flat.size, size=max_elems, replace=False)
            nums, anas = [], []
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(flat[i])
                fp = float(f().data)
                flat[i] = orig - eps
                lo = float(flat[i])
                fm = float(f().data)
                flat[i] = orig
                # divide by the step actually stored, which differs from 2*eps in float32
                num = (fp - fm) / (hi - lo)
                ana = a.reshape(-1)[i]
                nums.append(num)
                anas.append(ana)
            n_, a_ = np.asarray(nums), np.asarray(anas)
            if per == "tensor":
                err = np.linalg.norm(a_ - n_) / max(np.linalg.norm(a_), np.linalg.norm(n_), 1e-8)
            else:
                err = (np.abs(a_ - n_) / np.maximum(np.maximum(np.abs(a_), np.abs(n_)), 1e-8)).max(initial=0.0)
            worst = max(worst, float(err))
    for p, d in zip(params, saved):
        p.data = d
        p.grad = None
    return worst


def parameter(shape, rng, scale=None, dtype=np.float32):
    """Uniform fan-in initialised trainable tensor; ``scale=0`` gives zeros."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else 1
        scale = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-scale, scale, size=shape) if scale else np.zeros(shape)
    return Tensor(data.astype(dtype), requires_grad=True)
