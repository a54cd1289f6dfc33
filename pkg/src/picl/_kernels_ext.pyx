# cython: language_level=3
"""Compiled DBSCAN kernel. Semantics match ``picl._kernels_py`` exactly.

Distances come from the same numpy routine as the fallback so both
backends threshold bit-identical values; the neighbour graph and the
breadth-first expansion run here.
"""
import numpy as np
cimport numpy as cnp

from ._kernels_py import pairwise_distances

cnp.import_array()


def dbscan_labels(points, double eps, Py_ssize_t min_pts, bint cosine):
    """Return (labels, core_mask); noise is labelled -1."""
    cdef const double[:, ::1] dist = np.ascontiguousarray(
        pairwise_distances(np.asarray(points, dtype=np.float64), cosine))
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, j, k, p, q, head, tail, cluster = 0, n_edges = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] start_arr = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] start = start_arr
    cdef cnp.int64_t[::1] labels
    cdef cnp.uint8_t[::1] core
    cdef cnp.int64_t[::1] nbr
    cdef cnp.int64_t[::1] queue

    labels_arr = np.full(n, -1, dtype=np.int64)
    core_arr = np.zeros(n, dtype=np.uint8)
    queue_arr = np.empty(max(n, 1), dtype=np.int64)
    labels, core, queue = labels_arr, core_arr, queue_arr

    # neighbour counts (self included), then CSR adjacency in index order
    with nogil:
        for i in range(n):
            k = 1
            for j in range(n):
                if j != i and dist[i, j] <= eps:
                    k += 1
            start[i + 1] = start[i] + k
            core[i] = k >= min_pts
        n_edges = start[n]
    nbr_arr = np.empty(max(n_edges, 1), dtype=np.int64)
    nbr = nbr_arr
    with nogil:
        for i in range(n):
            k = start[i]
            for j in range(n):
                if j == i or dist[i, j] <= eps:
                    nbr[k] = j
                    k += 1

        for i in range(n):
            if labels[i] != -1 or not core[i]:
                continue
            labels[i] = cluster
            head = 0
            tail = 1
            queue[0] = i
            while head < tail:
                p = queue[head]
                head += 1
                for k in range(start[p], start[p + 1]):
                    q = nbr[k]
                    if labels[q] == -1:
                        labels[q] = cluster
                        if core[q]:
                            queue[tail] = q
                            tail += 1
            cluster += 1

    return labels_arr, core_arr.astype(bool)
