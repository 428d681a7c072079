"""Numpy fallback for the compiled kernel core.

Implements the same callables as ``_ckernels``: the fused LSTM gate
elementwise step (forward/backward) and the restricted Damerau-Levenshtein
distance. Results must match the compiled versions bit-for-bit in float64
and to float32 rounding otherwise; ``tests/test_kernels.py`` asserts this.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def cell_forward(pre: np.ndarray, c_prev: np.ndarray):
    """Fused LSTM gate step.

    pre is the (N, 4H) gate preactivation laid out [i | f | g | o];
    c_prev is the (N, H) previous cell state. Returns (hc, act) where
    hc is (N, 2H) = [h' | c'] and act caches the post-activation gates
    for the backward pass.
    """
    n, four_h = pre.shape
    h = four_h // 4
    act = np.empty_like(pre)
    # sigmoid on i, f, o; tanh on g
    act[:, :h] = 1.0 / (1.0 + np.exp(-pre[:, :h]))
    act[:, h : 2 * h] = 1.0 / (1.0 + np.exp(-pre[:, h : 2 * h]))
    act[:, 2 * h : 3 * h] = np.tanh(pre[:, 2 * h : 3 * h])
    act[:, 3 * h :] = 1.0 / (1.0 + np.exp(-pre[:, 3 * h :]))

    i = act[:, :h]
    f = act[:, h : 2 * h]
    g = act[:, 2 * h : 3 * h]
    o = act[:, 3 * h :]

    hc = np.empty((n, 2 * h), dtype=pre.dtype)
    c_new = f * c_prev + i * g
    hc[:, h:] = c_new
    hc[:, :h] = o * np.tanh(c_new)
    return hc, act


def cell_backward(ghc: np.ndarray, act: np.ndarray, c_prev: np.ndarray, c_new: np.ndarray):
    """Backward of :func:`cell_forward`.

    ghc is the (N, 2H) gradient w.r.t. [h' | c']. Returns (gpre, gc_prev).
    """
    n, four_h = act.shape
    h = four_h // 4
    i = act[:, :h]
    f = act[:, h : 2 * h]
    g = act[:, 2 * h : 3 * h]
    o = act[:, 3 * h :]
    gh = ghc[:, :h]
    gc_out = ghc[:, h:]

    tc = np.tanh(c_new)
    gc = gc_out + gh * o * (1.0 - tc * tc)

    gpre = np.empty_like(act)
    gpre[:, :h] = gc * g * i * (1.0 - i)
    gpre[:, h : 2 * h] = gc * c_prev * f * (1.0 - f)
    gpre[:, 2 * h : 3 * h] = gc * i * (1.0 - g * g)
    gpre[:, 3 * h :] = gh * tc * o * (1.0 - o)
    gc_prev = gc * f
    return gpre, gc_prev


def osa_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Restricted Damerau-Levenshtein (optimal string alignment) distance.

    a and b are int sequences; edits are insert, delete, substitute and
    adjacent transposition, with no substring edited twice.
    """
    a = np.asarray(a, dtype=np.int32)
    b = np.asarray(b, dtype=np.int32)
    m, n = len(a), len(b)
    if m == 0:
        return n
    if n == 0:
        return m
    prev2 = np.zeros(n + 1, dtype=np.int64)
    prev = np.arange(n + 1, dtype=np.int64)
    cur = np.empty(n + 1, dtype=np.int64)
    for ii in range(1, m + 1):
        cur[0] = ii
        for jj in range(1, n + 1):
            cost = 0 if a[ii - 1] == b[jj - 1] else 1
            d = min(prev[jj] + 1, cur[jj - 1] + 1, prev[jj - 1] + cost)
            if ii > 1 and jj > 1 and a[ii - 1] == b[jj - 2] and a[ii - 2] == b[jj - 1]:
                d = min(d, prev2[jj - 2] + 1)
            cur[jj] = d
        prev2, prev, cur = prev, cur, prev2
    return int(prev[n])


def osa_distance_block(a: np.ndarray, block: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Distances from one sequence to many, vectorized over the pair axis.

    block is (T, Lmax) int32 with rows padded past their length; lengths
    gives each row's true length. DP columns are advanced for all T rows
    at once, then rows are read off at their own length.
    """
    a = np.asarray(a, dtype=np.int32)
    block = np.asarray(block, dtype=np.int32)
    lengths = np.asarray(lengths, dtype=np.int64)
    t, lmax = block.shape
    m = len(a)
    out = np.empty(t, dtype=np.int64)
    if m == 0:
        out[:] = lengths
        return out
    if lmax == 0:
        out[:] = m
        return out
    prev2 = np.zeros((t, lmax + 1), dtype=np.int64)
    prev = np.broadcast_to(np.arange(lmax + 1, dtype=np.int64), (t, lmax + 1)).copy()
    cur = np.empty((t, lmax + 1), dtype=np.int64)
    done_zero = lengths == 0
    for ii in range(1, m + 1):
        cur[:, 0] = ii
        for jj in range(1, lmax + 1):
            cost = (a[ii - 1] != block[:, jj - 1]).astype(np.int64)
            d = np.minimum(prev[:, jj] + 1, cur[:, jj - 1] + 1)
            d = np.minimum(d, prev[:, jj - 1] + cost)
            if ii > 1 and jj > 1:
                swap = (a[ii - 1] == block[:, jj - 2]) & (a[ii - 2] == block[:, jj - 1])
                d = np.where(swap, np.minimum(d, prev2[:, jj - 2] + 1), d)
            cur[:, jj] = d
        prev2, prev, cur = prev, cur, prev2
    out = prev[np.arange(t), lengths]
    out[done_zero] = m
    return out
