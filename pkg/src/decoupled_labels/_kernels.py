"""Hot loops with a numba path and a pure-numpy path.

Set ``DECOUPLED_LABELS_DISABLE_NUMBA=1`` before import to force the numpy
path (useful for debugging and for cross-checking the two).
"""
import os

import numpy as np

_DISABLED = os.environ.get("DECOUPLED_LABELS_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def masked_kl_forward_np(x, y, mask):
    """Row-wise KL(softmax_{-k}(x) || softmax_{-k}(y)) with column ``mask[r]`` excluded."""
    n_rows, n_cols = x.shape
    rows = np.arange(n_rows)
    xm = x.copy()
    ym = y.copy()
    xm[rows, mask] = -np.inf
    ym[rows, mask] = -np.inf
    xm -= xm.max(axis=1, keepdims=True)
    ym -= ym.max(axis=1, keepdims=True)
    log_p = xm - np.log(np.exp(xm).sum(axis=1, keepdims=True))
    log_q = ym - np.log(np.exp(ym).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    q = np.exp(log_q)
    with np.errstate(invalid="ignore"):
        log_ratio = log_p - log_q
    log_ratio[rows, mask] = 0.0
    kl = (p * log_ratio).sum(axis=1)
    return kl, p, q, log_ratio


def masked_kl_backward_np(g, p, q, log_ratio, kl, mask):
    gx = g[:, None] * p * (log_ratio - kl[:, None])
    gy = g[:, None] * (q - p)
    rows = np.arange(p.shape[0])
    gx[rows, mask] = 0.0
    gy[rows, mask] = 0.0
    return gx, gy


def class_ranks_np(scores):
    """0-based rank of every class per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(scores.shape[1])[None, :]
    return ranks


def column_average_precision_np(scores, truth):
    n_seg, n_cls = scores.shape
    out = np.full(n_cls, np.nan)
    for c in range(n_cls):
        pos = truth[:, c]
        n_pos = int(pos.sum())
        if n_pos == 0:
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = pos[order].astype(np.float64)
        cum = np.cumsum(hits)
        prec = cum / np.arange(1, n_seg + 1)
        out[c] = float((prec * hits).sum() / n_pos)
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def masked_kl_forward_nb(x, y, mask):
        n_rows, n_cols = x.shape
        kl = np.zeros(n_rows)
        p = np.zeros((n_rows, n_cols))
        q = np.zeros((n_rows, n_cols))
        log_ratio = np.zeros((n_rows, n_cols))
        for r in range(n_rows):
            k = mask[r]
            mx = -np.inf
            my = -np.inf
            for j in range(n_cols):
                if j != k:
                    if x[r, j] > mx:
                        mx = x[r, j]
                    if y[r, j] > my:
                        my = y[r, j]
            sx = 0.0
            sy = 0.0
            for j in range(n_cols):
                if j != k:
                    sx += np.exp(x[r, j] - mx)
                    sy += np.exp(y[r, j] - my)
            lzx = mx + np.log(sx)
            lzy = my + np.log(sy)
            acc = 0.0
            for j in range(n_cols):
                if j != k:
                    lp = x[r, j] - lzx
                    lq = y[r, j] - lzy
                    p[r, j] = np.exp(lp)
                    q[r, j] = np.exp(lq)
                    log_ratio[r, j] = lp - lq
                    acc += p[r, j] * (lp - lq)
            kl[r] = acc
        return kl, p, q, log_ratio

    @njit(cache=True)
    def masked_kl_backward_nb(g, p, q, log_ratio, kl, mask):
        n_rows, n_cols = p.shape
        gx = np.zeros((n_rows, n_cols))
        gy = np.zeros((n_rows, n_cols))
        for r in range(n_rows):
            k = mask[r]
            for j in range(n_cols):
                if j != k:
                    gx[r, j] = g[r] * p[r, j] * (log_ratio[r, j] - kl[r])
                    gy[r, j] = g[r] * (q[r, j] - p[r, j])
        return gx, gy

    @njit(cache=True)
    def class_ranks_nb(scores):
        n_rows, n_cols = scores.shape
        ranks = np.zeros((n_rows, n_cols), dtype=np.int64)
        for r in range(n_rows):
            for j in range(n_cols):
                s = scores[r, j]
                c = 0
                for i in range(n_cols):
                    t = scores[r, i]
                    if t > s or (t == s and i < j):
                        c += 1
                ranks[r, j] = c
        return ranks

    @njit(cache=True)
    def column_average_precision_nb(scores, truth):
        n_seg, n_cls = scores.shape
        out = np.full(n_cls, np.nan)
        for c in range(n_cls):
            n_pos = 0
            for s in range(n_seg):
                if truth[s, c]:
                    n_pos += 1
            if n_pos == 0:
                continue
            order = np.argsort(-scores[:, c], kind="mergesort")
            hits = 0
            acc = 0.0
            for pos in range(n_seg):
                if truth[order[pos], c]:
                    hits += 1
                    acc += hits / (pos + 1.0)
            out[c] = acc / n_pos
        return out

    masked_kl_forward = masked_kl_forward_nb
    masked_kl_backward = masked_kl_backward_nb
    class_ranks = class_ranks_nb
    column_average_precision = column_average_precision_nb
else:
    masked_kl_forward = masked_kl_forward_np
    masked_kl_backward = masked_kl_backward_np
    class_ranks = class_ranks_np
    column_average_precision = column_average_precision_np
