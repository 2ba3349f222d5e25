"""Numba-compiled causal attention kernels for the float32 training path.

Layouts are chosen so every inner loop runs over the long key axis and
vectorizes: queries as (B*H, S, head_dim), keys/values transposed to
(B*H, head_dim, S). The softmax normalizer accumulates in float64.

The exp itself runs through numpy's vectorized float32 exp between the two
kernels (scores are stored max-shifted, masked slots get a large negative
so exp flushes them to zero).

Results are deterministic for any thread count: each output element is
written by exactly one thread and no cross-thread reductions occur.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_MASKED = np.float32(-1e30)


@njit(parallel=True, fastmath=True, cache=True)
def attn_scores(q, kt, scores, scale):
    """scores[i, j<=i] = q_i . k_j * scale - rowmax ; j>i slots get a large negative."""
    BH, S, hd = q.shape
    for bh in prange(BH):
        qb = q[bh]
        ktb = kt[bh]
        sb = scores[bh]
        for i in range(S):
            n = i + 1
            row = sb[i]
            for j in range(n):
                row[j] = 0.0
            for t in range(hd):
                qt_ = qb[i, t] * scale
                kr = ktb[t]
                for j in range(n):
                    row[j] += qt_ * kr[j]
            m = row[0]
            for j in range(1, n):
                if row[j] > m:
                    m = row[j]
            for j in range(n):
                row[j] -= m
            for j in range(n, S):
                row[j] = _MASKED
        # np.exp on the caller side turns these into unnormalized probabilities


@njit(parallel=True, fastmath=True, cache=True)
def attn_normalize_pv(probs, vt, ctx):
    """Normalize exp'd score rows in place (float64 sums) and compute P @ V."""
    BH, S, S2 = probs.shape
    hd = vt.shape[1]
    for bh in prange(BH):
        pb = probs[bh]
        vtb = vt[bh]
        cb = ctx[bh]
        for i in range(S):
            n = i + 1
            row = pb[i]
            ssum = 0.0
            for j in range(n):
                ssum += row[j]
            inv = np.float32(1.0 / ssum)
            for j in range(n):
                row[j] *= inv
            for j in range(n, S):
                row[j] = 0.0
            for t in range(hd):
                vr = vtb[t]
                acc = np.float32(0.0)
                for j in range(n):
                    acc += row[j] * vr[j]
                cb[i, t] = acc


@njit(parallel=True, fastmath=True, cache=True)
def attn_backward(q, kt, vt, probs, dctx, dq, dkt, dvt, scale):
    """Backward through softmax(QK^T * scale) @ V given normalized probs."""
    BH, S, hd = q.shape
    for bh in prange(BH):
        qb = q[bh]
        ktb = kt[bh]
        vtb = vt[bh]
        pb = probs[bh]
        dob = dctx[bh]
        dqb = dq[bh]
        dktb = dkt[bh]
        dvtb = dvt[bh]
        for t in range(hd):
            for j in range(S):
                dktb[t, j] = 0.0
                dvtb[t, j] = 0.0
        dsrow = np.empty(S, np.float32)
        for i in range(S):
            n = i + 1
            prow = pb[i]
            for j in range(n):
                dsrow[j] = 0.0
            for t in range(hd):
                dt_ = dob[i, t]
                vr = vtb[t]
                for j in range(n):
                    dsrow[j] += dt_ * vr[j]
            rs = 0.0
            for j in range(n):
                rs += dsrow[j] * prow[j]
            rsf = np.float32(rs)
            for j in range(n):
                dsrow[j] = prow[j] * (dsrow[j] - rsf) * scale
            for t in range(hd):
                dt_ = dob[i, t]
                qt_ = qb[i, t]
                dvr = dvtb[t]
                dkr = dktb[t]
                kr = ktb[t]
                acc = np.float32(0.0)
                for j in range(n):
                    dvr[j] += prow[j] * dt_
                    dkr[j] += dsrow[j] * qt_
                    acc += dsrow[j] * kr[j]
                dqb[i, t] = acc


class BufferPool:
    """Reusable float buffers keyed by tag; avoids re-faulting large mmap'd blocks."""

    def __init__(self):
        self._bufs = {}

    def get(self, tag: str, shape, dtype) -> np.ndarray:
        buf = self._bufs.get(tag)
        if buf is None or buf.shape != tuple(shape) or buf.dtype != np.dtype(dtype):
            buf = np.empty(shape, dtype)
            self._bufs[tag] = buf
        return buf
