# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels. Semantics mirror ``_pykernels`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint8_t

cnp.import_array()


def confusion_counts(const uint8_t[::1] pred, const uint8_t[::1] gt):
    # inputs are 0/1; branch-free sums vectorize
    cdef Py_ssize_t n = pred.shape[0]
    cdef Py_ssize_t i
    cdef int64_t tp = 0, sp = 0, sg = 0
    if gt.shape[0] != n:
        raise ValueError("pred and gt lengths differ")
    with nogil:
        for i in range(n):
            tp += pred[i] & gt[i]
            sp += pred[i]
            sg += gt[i]
    return tp, sp - tp, n - sp - sg + tp, sg - tp


cdef inline Py_ssize_t _n_le(const double[::1] t, double v) noexcept nogil:
    # number of thresholds <= v (t sorted ascending); NaN sorts last
    cdef Py_ssize_t lo = 0, hi = t.shape[0], mid
    if v != v:
        return hi
    while lo < hi:
        mid = (lo + hi) >> 1
        if t[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _n_le_uniform(const double[::1] t, double v, double t0, double inv_step) noexcept nogil:
    # guess from the spacing, then correct; exact for any sorted t
    cdef Py_ssize_t m = t.shape[0], k
    cdef double g
    if v != v:
        return m
    g = (v - t0) * inv_step + 1.0
    if g <= 0.0:
        k = 0
    elif g >= m:
        k = m
    else:
        k = <Py_ssize_t>g
    while k > 0 and t[k - 1] > v:
        k -= 1
    while k < m and t[k] <= v:
        k += 1
    return k


def threshold_histogram(const double[::1] probs, const uint8_t[::1] gt,
                        const double[::1] thresholds):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t m = thresholds.shape[0]
    cdef Py_ssize_t i, k
    cdef double t0 = 0.0, inv_step = 0.0
    cdef bint uniform = False
    if gt.shape[0] != n:
        raise ValueError("probs and gt lengths differ")
    if m >= 2:
        t0 = thresholds[0]
        step = (thresholds[m - 1] - t0) / (m - 1)
        if step > 0:
            inv_step = 1.0 / step
            uniform = True
    hist = np.zeros(2 * (m + 1), dtype=np.int64)
    cdef int64_t[::1] hv = hist
    with nogil:
        if uniform:
            for i in range(n):
                k = _n_le_uniform(thresholds, probs[i], t0, inv_step)
                hv[2 * k + gt[i]] += 1
        else:
            for i in range(n):
                k = _n_le(thresholds, probs[i])
                hv[2 * k + gt[i]] += 1
    return hist[1::2].copy(), hist[0::2].copy()


cdef inline int32_t _find(int32_t[::1] parent, int32_t a) noexcept nogil:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def label_components(const uint8_t[:, ::1] mask):
    """4-connected labelling, labels numbered in raster order of first pixel.

    Two passes with union-find over provisional labels.
    """
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    labels = np.zeros((h, w), dtype=np.int32)
    cdef int32_t[:, ::1] lab = labels
    parent_arr = np.zeros((h * w) // 2 + 2, dtype=np.int32)
    cdef int32_t[::1] parent = parent_arr
    final_arr = np.zeros((h * w) // 2 + 2, dtype=np.int32)
    cdef int32_t[::1] final = final_arr
    cdef Py_ssize_t r, c
    cdef int32_t up, left, a, b, nxt = 1, current = 0
    with nogil:
        for r in range(h):
            for c in range(w):
                if mask[r, c] == 0:
                    continue
                up = lab[r - 1, c] if r > 0 else 0
                left = lab[r, c - 1] if c > 0 else 0
                if up == 0 and left == 0:
                    parent[nxt] = nxt
                    lab[r, c] = nxt
                    nxt += 1
                elif up == 0:
                    lab[r, c] = left
                elif left == 0 or left == up:
                    lab[r, c] = up
                else:
                    a = _find(parent, up)
                    b = _find(parent, left)
                    if a < b:
                        parent[b] = a
                    elif b < a:
                        parent[a] = b
                    lab[r, c] = left
        for r in range(h):
            for c in range(w):
                if lab[r, c] == 0:
                    continue
                a = _find(parent, lab[r, c])
                if final[a] == 0:
                    current += 1
                    final[a] = current
                lab[r, c] = final[a]
    return labels, int(current)
