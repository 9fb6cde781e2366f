# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``.

Results must stay bit-identical to the numpy versions: the copies are exact
and ``col2im`` adds taps in the same (ki, kj) order per element.
"""
import numpy as np
cimport numpy as cnp

from libc.string cimport memcpy

cnp.import_array()


def im2col(double[:, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t c = xp.shape[0], h = xp.shape[1], w = xp.shape[2]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    out = np.empty((c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double *src = &xp[0, 0, 0]
    cdef double *dst = &o[0, 0]
    cdef double *s
    cdef double *d
    cdef Py_ssize_t ci, ki, kj, y, x
    with nogil:
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    d = dst + ((ci * kh + ki) * kw + kj) * ho * wo
                    for y in range(ho):
                        s = src + (ci * h + y * stride + ki) * w + kj
                        if stride == 1:
                            memcpy(d, s, wo * sizeof(double))
                        else:
                            for x in range(wo):
                                d[x] = s[x * stride]
                        d += wo
    return out


def col2im(double[:, ::1] cols, int c, int h, int w, int kh, int kw, int stride):
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    out = np.zeros((c, h, w), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double *dst = &o[0, 0, 0]
    cdef double *src = &cols[0, 0]
    cdef double *s
    cdef double *d
    cdef Py_ssize_t ci, ki, kj, y, x
    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                for ci in range(c):
                    s = src + ((ci * kh + ki) * kw + kj) * ho * wo
                    for y in range(ho):
                        d = dst + (ci * h + y * stride + ki) * w + kj
                        for x in range(wo):
                            d[x * stride] += s[x]
                        s += wo
    return out


def maxpool2_forward(double[:, :, ::1] x):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out = np.empty((c, ho, wo), dtype=np.float64)
    arg = np.empty((c, ho, wo), dtype=np.int64)
    cdef double[:, :, ::1] o = out
    cdef cnp.int64_t[:, :, ::1] a = arg
    cdef Py_ssize_t ci, i, j, r, q, best_idx
    cdef double best, v
    with nogil:
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    r = 2 * i
                    q = 2 * j
                    best = x[ci, r, q]
                    best_idx = r * w + q
                    v = x[ci, r, q + 1]
                    if v > best:
                        best = v
                        best_idx = r * w + q + 1
                    v = x[ci, r + 1, q]
                    if v > best:
                        best = v
                        best_idx = (r + 1) * w + q
                    v = x[ci, r + 1, q + 1]
                    if v > best:
                        best = v
                        best_idx = (r + 1) * w + q + 1
                    o[ci, i, j] = best
                    a[ci, i, j] = best_idx
    return out, arg


def maxpool2_backward(double[:, :, ::1] grad, cnp.int64_t[:, :, ::1] argmax, int h, int w):
    cdef Py_ssize_t c = grad.shape[0], ho = grad.shape[1], wo = grad.shape[2]
    out = np.zeros((c, h * w), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t ci, i, j
    with nogil:
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    o[ci, argmax[ci, i, j]] = grad[ci, i, j]
    return out.reshape(c, h, w)


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


cdef inline Py_ssize_t _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
        return a
    parent[a] = b
    return b


def label8(mask):
    m_arr = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] m = m_arr
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    prov_arr = np.zeros((h, w), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] prov = prov_arr
    parent_arr = np.zeros(h * w + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    final_arr = np.zeros(h * w + 1, dtype=np.int32)
    cdef int[::1] final = final_arr
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    cdef Py_ssize_t y, x, nxt = 1, cur, r
    cdef int n = 0
    with nogil:
        for y in range(h):
            for x in range(w):
                if not m[y, x]:
                    continue
                cur = 0
                if x > 0 and prov[y, x - 1]:
                    cur = prov[y, x - 1]
                if y > 0:
                    if x > 0 and prov[y - 1, x - 1]:
                        cur = _union(parent, cur, prov[y - 1, x - 1]) if cur else prov[y - 1, x - 1]
                    if prov[y - 1, x]:
                        cur = _union(parent, cur, prov[y - 1, x]) if cur else prov[y - 1, x]
                    if x + 1 < w and prov[y - 1, x + 1]:
                        cur = _union(parent, cur, prov[y - 1, x + 1]) if cur else prov[y - 1, x + 1]
                if cur == 0:
                    parent[nxt] = nxt
                    cur = nxt
                    nxt += 1
                prov[y, x] = cur
        for y in range(h):
            for x in range(w):
                if prov[y, x]:
                    r = _find(parent, prov[y, x])
                    if final[r] == 0:
                        n += 1
                        final[r] = n
                    labels[y, x] = final[r]
    return labels_arr, n
