# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def splat_zbuffer(const cnp.int64_t[:] px, const cnp.int64_t[:] py,
                  const double[:] depth, Py_ssize_t height, Py_ssize_t width,
                  Py_ssize_t radius):
    cdef Py_ssize_t m = px.shape[0]
    winner_arr = np.full(height * width, -1, dtype=np.int64)
    zbuf_arr = np.full(height * width, np.inf, dtype=np.float64)
    cdef cnp.int64_t[:] winner = winner_arr
    cdef double[:] zbuf = zbuf_arr
    cdef Py_ssize_t i, x, y, x0, x1, y0, y1, k
    cdef double d
    with nogil:
        for i in range(m):
            d = depth[i]
            x0 = px[i] - radius
            x1 = px[i] + radius
            y0 = py[i] - radius
            y1 = py[i] + radius
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > width - 1:
                x1 = width - 1
            if y1 > height - 1:
                y1 = height - 1
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    k = y * width + x
                    if d < zbuf[k]:
                        zbuf[k] = d
                        winner[k] = i
    return winner_arr, zbuf_arr


def segment_accumulate(const cnp.int64_t[:] index, const double[:, :] rows,
                       Py_ssize_t n_out):
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t c = rows.shape[1]
    sums_arr = np.zeros((n_out, c), dtype=np.float64)
    counts_arr = np.zeros(n_out, dtype=np.int64)
    cdef double[:, :] sums = sums_arr
    cdef cnp.int64_t[:] counts = counts_arr
    cdef Py_ssize_t i, j, p
    with nogil:
        for i in range(m):
            p = index[i]
            counts[p] += 1
            for j in range(c):
                sums[p, j] += rows[i, j]
    return sums_arr, counts_arr


def dbscan_core_labels(const cnp.int64_t[:] indptr, const cnp.int64_t[:] indices,
                       Py_ssize_t min_pts):
    """Cluster labels before renumbering: core components, then border points."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    labels_arr = np.full(n, -1, dtype=np.int64)
    core_arr = np.zeros(n, dtype=np.uint8)
    queue_arr = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int64_t[:] labels = labels_arr
    cdef cnp.uint8_t[:] core = core_arr
    cdef cnp.int64_t[:] queue = queue_arr
    cdef Py_ssize_t i, j, a, head, tail, q, cluster = 0
    with nogil:
        for i in range(n):
            if indptr[i + 1] - indptr[i] >= min_pts:
                core[i] = 1
        for i in range(n):
            if not core[i] or labels[i] >= 0:
                continue
            labels[i] = cluster
            head = 0
            tail = 1
            queue[0] = i
            while head < tail:
                q = queue[head]
                head += 1
                for a in range(indptr[q], indptr[q + 1]):
                    j = indices[a]
                    if core[j] and labels[j] < 0:
                        labels[j] = cluster
                        queue[tail] = j
                        tail += 1
            cluster += 1
        for i in range(n):
            if core[i]:
                continue
            # earliest-discovered cluster among core neighbors, as in sequential expansion
            for a in range(indptr[i], indptr[i + 1]):
                j = indices[a]
                if core[j] and (labels[i] < 0 or labels[j] < labels[i]):
                    labels[i] = labels[j]
    return labels_arr, core_arr.astype(bool)
