"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. Set ``SSLASR_NUMBA=0`` in the environment
to force the numpy path (useful for debugging and for the benchmark in
``benchmarks/bench_kernels.py``). Both paths compute the same quantities; the
test-suite checks them against each other.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SSLASR_NUMBA", "1") != "0"

NEG_INF = -np.inf


def set_threads(n: int) -> None:
    """Cap the numba thread pool (no-op without numba)."""
    if numba is not None and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _maybe_njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# RNN-T lattice forward/backward
# ---------------------------------------------------------------------------


def _logaddexp_scalar(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


_logaddexp_nb = _maybe_njit(_logaddexp_scalar)


def _rnnt_single_loop(blank, emit, T, U, grad_blank, grad_emit):
    # blank: (T, U+1), emit: (T, U); returns -log P and fills grads in place.
    alpha = np.empty((T, U + 1))
    beta = np.empty((T, U + 1))
    alpha[0, 0] = 0.0
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + emit[0, u - 1]
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + blank[t - 1, 0]
        for u in range(1, U + 1):
            alpha[t, u] = _logaddexp_nb(
                alpha[t - 1, u] + blank[t - 1, u], alpha[t, u - 1] + emit[t, u - 1]
            )
    beta[T - 1, U] = blank[T - 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + emit[T - 1, u]
    for t in range(T - 2, -1, -1):
        beta[t, U] = beta[t + 1, U] + blank[t, U]
        for u in range(U - 1, -1, -1):
            beta[t, u] = _logaddexp_nb(
                beta[t + 1, u] + blank[t, u], beta[t, u + 1] + emit[t, u]
            )
    log_p = beta[0, 0]
    for t in range(T):
        for u in range(U + 1):
            if t < T - 1:
                nxt = beta[t + 1, u]
            elif u == U:
                nxt = 0.0
            else:
                nxt = NEG_INF
            if nxt != NEG_INF:
                grad_blank[t, u] = -np.exp(alpha[t, u] + blank[t, u] + nxt - log_p)
            else:
                grad_blank[t, u] = 0.0
            if u < U:
                grad_emit[t, u] = -np.exp(
                    alpha[t, u] + emit[t, u] + beta[t, u + 1] - log_p
                )
    return -log_p


_rnnt_single_nb = _maybe_njit(_rnnt_single_loop)


def _rnnt_batch_loop(blank, emit, t_lens, u_lens):
    B = blank.shape[0]
    losses = np.zeros(B)
    grad_blank = np.zeros(blank.shape)
    grad_emit = np.zeros(emit.shape)
    for b in range(B):
        T = t_lens[b]
        U = u_lens[b]
        losses[b] = _rnnt_single_nb(
            blank[b, :T, : U + 1],
            emit[b, :T, :U],
            T,
            U,
            grad_blank[b, :T, : U + 1],
            grad_emit[b, :T, :U],
        )
    return losses, grad_blank, grad_emit


_rnnt_batch_nb = _maybe_njit(_rnnt_batch_loop)


def _rnnt_single_numpy(blank, emit):
    """Anti-diagonal vectorised DP over one lattice."""
    T, U1 = blank.shape
    U = U1 - 1
    alpha = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for n in range(1, T + U):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        from_blank = np.full(t.shape, NEG_INF)
        ok = t > 0
        from_blank[ok] = alpha[t[ok] - 1, u[ok]] + blank[t[ok] - 1, u[ok]]
        from_emit = np.full(t.shape, NEG_INF)
        ok = u > 0
        from_emit[ok] = alpha[t[ok], u[ok] - 1] + emit[t[ok], u[ok] - 1]
        alpha[t, u] = np.logaddexp(from_blank, from_emit)
    beta = np.full((T, U1), NEG_INF)
    beta[T - 1, U] = blank[T - 1, U]
    for n in range(T + U - 2, -1, -1):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        via_blank = np.full(t.shape, NEG_INF)
        ok = t < T - 1
        via_blank[ok] = beta[t[ok] + 1, u[ok]] + blank[t[ok], u[ok]]
        via_emit = np.full(t.shape, NEG_INF)
        ok = u < U
        via_emit[ok] = beta[t[ok], u[ok] + 1] + emit[t[ok], u[ok]]
        beta[t, u] = np.logaddexp(via_blank, via_emit)
    log_p = beta[0, 0]
    nxt = np.full((T, U1), NEG_INF)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U] = 0.0
    with np.errstate(invalid="ignore"):
        grad_blank = -np.exp(alpha + blank + nxt - log_p)
        grad_emit = -np.exp(alpha[:, :U] + emit + beta[:, 1:] - log_p)
    grad_blank[~np.isfinite(nxt)] = 0.0
    return -log_p, grad_blank, grad_emit


def _rnnt_batch_numpy(blank, emit, t_lens, u_lens):
    B = blank.shape[0]
    losses = np.zeros(B)
    grad_blank = np.zeros(blank.shape)
    grad_emit = np.zeros(emit.shape)
    for b in range(B):
        T, U = int(t_lens[b]), int(u_lens[b])
        loss, gb, ge = _rnnt_single_numpy(blank[b, :T, : U + 1], emit[b, :T, :U])
        losses[b] = loss
        grad_blank[b, :T, : U + 1] = gb
        grad_emit[b, :T, :U] = ge
    return losses, grad_blank, grad_emit


def rnnt_lattice(blank, emit, t_lens, u_lens, use_numba=None):
    """Exact RNN-T negative log-likelihood and its gradient.

    Args:
      blank: (B, T, U+1) log-probabilities of blank at each lattice node.
      emit: (B, T, U) log-probabilities of emitting ``y[u]`` at node (t, u).
      t_lens, u_lens: valid lengths per batch item.

    Returns:
      ``(losses, d_blank, d_emit)`` where losses is ``-log P(y|x)`` per item and
      the gradients are of the per-item loss w.r.t. the two inputs (zero
      outside the valid region).
    """
    blank = np.ascontiguousarray(blank, dtype=np.float64)
    emit = np.ascontiguousarray(emit, dtype=np.float64)
    t_lens = np.ascontiguousarray(t_lens, dtype=np.int64)
    u_lens = np.ascontiguousarray(u_lens, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and numba is not None:
        return _rnnt_batch_nb(blank, emit, t_lens, u_lens)
    return _rnnt_batch_numpy(blank, emit, t_lens, u_lens)


# ---------------------------------------------------------------------------
# Levenshtein alignment
# ---------------------------------------------------------------------------

# backtrace preference on ties: substitution/match, then insertion, then deletion


def _edit_ops_loop(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        cost[i, 0] = i
    for j in range(m + 1):
        cost[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            ins = cost[i, j - 1] + 1
            dele = cost[i - 1, j] + 1
            best = sub
            if ins < best:
                best = ins
            if dele < best:
                best = dele
            cost[i, j] = best
    s = 0
    d = 0
    ins_count = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            diag = cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            if diag == cost[i, j]:
                if ref[i - 1] != hyp[j - 1]:
                    s += 1
                i -= 1
                j -= 1
                continue
        if j > 0 and cost[i, j - 1] + 1 == cost[i, j]:
            ins_count += 1
            j -= 1
            continue
        d += 1
        i -= 1
    return s, d, ins_count


_edit_ops_nb = _maybe_njit(_edit_ops_loop)


def _edit_ops_numpy(ref, hyp):
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    # row-wise: the insertion term is a running min, so resolve it with an
    # accumulate after taking the best of substitution and deletion
    offs = np.arange(m + 1)
    for i in range(1, n + 1):
        sub = cost[i - 1, :-1] + (ref[i - 1] != hyp).astype(np.int64)
        dele = cost[i - 1, 1:] + 1
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        row[1:] = np.minimum(sub, dele)
        cost[i] = np.minimum.accumulate(row - offs) + offs
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            mismatch = int(ref[i - 1] != hyp[j - 1])
            if cost[i - 1, j - 1] + mismatch == cost[i, j]:
                s += mismatch
                i -= 1
                j -= 1
                continue
        if j > 0 and cost[i, j - 1] + 1 == cost[i, j]:
            ins += 1
            j -= 1
            continue
        d += 1
        i -= 1
    return s, d, ins


def edit_ops(ref, hyp, use_numba=None):
    """Return (substitutions, deletions, insertions) of a minimal alignment."""
    ref = np.ascontiguousarray(ref, dtype=np.int64)
    hyp = np.ascontiguousarray(hyp, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and numba is not None:
        s, d, i = _edit_ops_nb(ref, hyp)
    else:
        s, d, i = _edit_ops_numpy(ref, hyp)
    return int(s), int(d), int(i)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _assign_loop(x, centroids):
    n, dim = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            acc = 0.0
            for j in range(dim):
                diff = x[i, j] - centroids[c, j]
                acc += diff * diff
            if acc < best:
                best = acc
                arg = c
        labels[i] = arg
        dists[i] = best
    return labels, dists


_assign_nb = _maybe_njit(_assign_loop)


def _assign_numpy(x, centroids, block=4096):
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for start in range(0, n, block):
        diff = x[start : start + block, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        arg = np.argmin(d2, axis=1)  # first minimum -> lowest index on ties
        labels[start : start + block] = arg
        dists[start : start + block] = d2[np.arange(len(arg)), arg]
    return labels, dists


def assign_nearest(x, centroids, use_numba=None):
    """Nearest centroid by squared Euclidean distance, ties to lowest index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and numba is not None:
        return _assign_nb(x, centroids)
    return _assign_numpy(x, centroids)


def _centroid_sums_loop(x, labels, k):
    dim = x.shape[1]
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(x.shape[0]):
        c = labels[i]
        counts[c] += 1
        for j in range(dim):
            sums[c, j] += x[i, j]
    return sums, counts


_centroid_sums_nb = _maybe_njit(_centroid_sums_loop)


def centroid_sums(x, labels, k, use_numba=None):
    """Per-cluster coordinate sums (64-bit) and member counts."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and numba is not None:
        return _centroid_sums_nb(x, labels, k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


# ---------------------------------------------------------------------------
# span masks
# ---------------------------------------------------------------------------


def _spans_loop(starts, span):
    T = starts.shape[0]
    out = np.zeros(T, dtype=np.bool_)
    reach = -1
    for t in range(T):
        if starts[t]:
            end = t + span - 1
            if end > reach:
                reach = end
        if t <= reach:
            out[t] = True
    return out


_spans_nb = _maybe_njit(_spans_loop)


def spans_from_starts(starts, span, use_numba=None):
    """Union of ``[s, s + span)`` over every start flag, clipped to length."""
    starts = np.ascontiguousarray(starts, dtype=np.bool_)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and numba is not None:
        return _spans_nb(starts, span)
    if starts.size == 0:
        return starts.copy()
    hits = np.convolve(starts.astype(np.int64), np.ones(span, dtype=np.int64))
    return hits[: starts.shape[0]] > 0
