# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: non-dominated sorting, union-find, exact top-k selection.

Every function here has a drop-in twin in ``pas._pycore``; outputs must match
bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _dominates(const double[:, ::1] v, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef Py_ssize_t m
    cdef bint strict = 0
    for m in range(v.shape[1]):
        if v[a, m] < v[b, m]:
            return 0
        if v[a, m] > v[b, m]:
            strict = 1
    return strict


def front_ranks(const double[:, ::1] values, const cnp.int64_t[::1] order):
    """Front index per row; ``order`` must be a lexicographically descending order."""
    cdef Py_ssize_t n = values.shape[0]
    cdef cnp.int64_t[::1] rank = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] head = np.full(n + 1, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] tail = np.full(n + 1, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] nxt = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t nfronts = 0
    cdef Py_ssize_t t, p, lo, hi, mid, q
    cdef bint hit
    with nogil:
        for t in range(n):
            p = order[t]
            lo = 0
            hi = nfronts
            # smallest front with no member dominating p
            while lo < hi:
                mid = (lo + hi) // 2
                hit = 0
                q = head[mid]
                while q != -1:
                    if _dominates(values, q, p):
                        hit = 1
                        break
                    q = nxt[q]
                if hit:
                    lo = mid + 1
                else:
                    hi = mid
            rank[p] = lo
            if lo == nfronts:
                nfronts += 1
                head[lo] = p
            else:
                nxt[tail[lo]] = p
            tail[lo] = p
    return np.asarray(rank)


cdef Py_ssize_t _find(cnp.int64_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x
    cdef Py_ssize_t step
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        step = parent[x]
        parent[x] = root
        x = step
    return root


def component_labels(Py_ssize_t n, const cnp.int64_t[::1] src, const cnp.int64_t[::1] dst):
    """Label each node with the smallest node index in its connected component."""
    cdef cnp.int64_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef Py_ssize_t e, a, b
    with nogil:
        for e in range(src.shape[0]):
            a = _find(parent, src[e])
            b = _find(parent, dst[e])
            if a < b:
                parent[b] = a
            elif b < a:
                parent[a] = b
        for a in range(n):
            parent[a] = _find(parent, a)
    return np.asarray(parent)


cdef inline bint _better(double sa, cnp.int64_t ra, double sb, cnp.int64_t rb) noexcept nogil:
    return sa > sb or (sa == sb and ra < rb)


cdef void _sift_down(double* hs, cnp.int64_t* hr, cnp.int64_t* hi, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    # min-heap on "better": root holds the worst kept entry
    cdef Py_ssize_t child, right
    cdef double ts
    cdef cnp.int64_t tr, ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            return
        right = child + 1
        if right < size and _better(hs[child], hr[child], hs[right], hr[right]):
            child = right
        if _better(hs[child], hr[child], hs[pos], hr[pos]):
            return
        ts = hs[pos]; hs[pos] = hs[child]; hs[child] = ts
        tr = hr[pos]; hr[pos] = hr[child]; hr[child] = tr
        ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
        pos = child


def select_topk(const double[:, ::1] sims, const cnp.int64_t[::1] rank, Py_ssize_t k,
                const cnp.int64_t[::1] exclude):
    """Per row, the k best columns by (similarity desc, rank asc); -1 pads short rows."""
    cdef Py_ssize_t b = sims.shape[0]
    cdef Py_ssize_t n = sims.shape[1]
    out_np = np.full((b, k), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_np
    cdef double[::1] hs = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] hr = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] hi = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t row, j, size, pos, parent, t
    cdef double s, ts
    cdef cnp.int64_t tr, ti
    if k == 0:
        return out_np
    with nogil:
        for row in range(b):
            size = 0
            for j in range(n):
                if j == exclude[row]:
                    continue
                s = sims[row, j]
                if size < k:
                    pos = size
                    hs[pos] = s; hr[pos] = rank[j]; hi[pos] = j
                    size += 1
                    while pos > 0:
                        parent = (pos - 1) // 2
                        if _better(hs[parent], hr[parent], hs[pos], hr[pos]):
                            ts = hs[pos]; hs[pos] = hs[parent]; hs[parent] = ts
                            tr = hr[pos]; hr[pos] = hr[parent]; hr[parent] = tr
                            ti = hi[pos]; hi[pos] = hi[parent]; hi[parent] = ti
                            pos = parent
                        else:
                            break
                elif _better(s, rank[j], hs[0], hr[0]):
                    hs[0] = s; hr[0] = rank[j]; hi[0] = j
                    _sift_down(&hs[0], &hr[0], &hi[0], size, 0)
            # drain worst-first into the tail
            t = size
            while t > 0:
                t -= 1
                out[row, t] = hi[0]
                hs[0] = hs[t]; hr[0] = hr[t]; hi[0] = hi[t]
                _sift_down(&hs[0], &hr[0], &hi[0], t, 0)
    return out_np
