# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. ``_fallback.py`` mirrors every function here."""

import numpy as np

from libc.math cimport fabs, pow, sqrt, INFINITY
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free, qsort


cdef extern from *:
    """
    #if defined(_MSC_VER)
    #include <intrin.h>
    #define PMF_POPCOUNT(x) ((int)__popcnt64(x))
    #else
    #define PMF_POPCOUNT(x) __builtin_popcountll(x)
    #endif
    """
    int PMF_POPCOUNT(unsigned long long x) nogil


# ---------------------------------------------------------------- hamming

def code_scores(const uint64_t[:, ::1] codes, const uint64_t[::1] query, int nbits):
    """``nbits - 2 * popcount(code ^ query)`` for every row of ``codes``."""
    cdef Py_ssize_t n = codes.shape[0], w = codes.shape[1], i, j
    cdef int64_t h
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    with nogil:
        for i in range(n):
            h = 0
            for j in range(w):
                h += PMF_POPCOUNT(codes[i, j] ^ query[j])
            o[i] = nbits - 2 * h
    return out


def code_scores_batch(const uint64_t[:, ::1] codes, const uint64_t[:, ::1] queries, int nbits):
    cdef Py_ssize_t n = codes.shape[0], w = codes.shape[1], nq = queries.shape[0]
    cdef Py_ssize_t i, j, q
    cdef int64_t h
    out = np.empty((nq, n), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    with nogil:
        for q in range(nq):
            for i in range(n):
                h = 0
                for j in range(w):
                    h += PMF_POPCOUNT(codes[i, j] ^ queries[q, j])
                o[q, i] = nbits - 2 * h
    return out


# ---------------------------------------------------------------- exact k-NN

cdef inline bint _better(double d, int64_t i, double bd, int64_t bi) nogil:
    return d < bd or (d == bd and i < bi)


cdef inline void _insert(double d, int64_t i, double* bd, int64_t* bi, int* count, int k) nogil:
    cdef int pos
    if count[0] < k:
        pos = count[0]
        count[0] += 1
    elif _better(d, i, bd[k - 1], bi[k - 1]):
        pos = k - 1
    else:
        return
    while pos > 0 and _better(d, i, bd[pos - 1], bi[pos - 1]):
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d
    bi[pos] = i


def tree_knn(const double[:, ::1] data, const int64_t[::1] order,
             const int64_t[::1] axis, const double[:, ::1] normal,
             const double[::1] offset, const double[::1] scale,
             const int64_t[::1] left, const int64_t[::1] right,
             const int64_t[::1] start, const int64_t[::1] end, int64_t root,
             const double[:, ::1] queries, int k, double p):
    """Branch-and-bound k-NN over a flattened partition tree.

    Distances are returned in comparison space: squared for ``p == 2``,
    ``sum |d_i|^p`` otherwise. Ties go to the smaller point id.
    """
    cdef Py_ssize_t nq = queries.shape[0], dim = data.shape[1]
    cdef Py_ssize_t nnodes = left.shape[0]
    cdef Py_ssize_t q, j, c
    cdef int64_t node, pid, near, far
    cdef double b, proj, diff, pb, acc, t, worst
    cdef int count, sp
    cdef bint l2 = p == 2.0
    cdef int mode = 0 if l2 else (1 if p == 1.0 else (2 if p == 0.5 else 3))

    ids = np.full((nq, k), -1, dtype=np.int64)
    dists = np.full((nq, k), INFINITY, dtype=np.float64)
    cdef int64_t[:, ::1] ids_v = ids
    cdef double[:, ::1] dists_v = dists

    cdef int64_t* stack_node = <int64_t*> malloc((nnodes + 1) * sizeof(int64_t))
    cdef double* stack_bound = <double*> malloc((nnodes + 1) * sizeof(double))
    cdef double* bd = <double*> malloc(k * sizeof(double))
    cdef int64_t* bi = <int64_t*> malloc(k * sizeof(int64_t))
    if not stack_node or not stack_bound or not bd or not bi:
        free(stack_node); free(stack_bound); free(bd); free(bi)
        raise MemoryError()
    try:
        with nogil:
            for q in range(nq):
                count = 0
                sp = 0
                stack_node[0] = root
                stack_bound[0] = 0.0
                sp = 1
                while sp > 0:
                    sp -= 1
                    node = stack_node[sp]
                    b = stack_bound[sp]
                    if count == k and b > bd[k - 1]:
                        continue
                    if left[node] < 0:
                        for j in range(start[node], end[node]):
                            pid = order[j]
                            worst = bd[k - 1] if count == k else INFINITY
                            acc = 0.0
                            for c in range(dim):
                                t = fabs(data[pid, c] - queries[q, c])
                                if mode == 0:
                                    acc += t * t
                                elif mode == 1:
                                    acc += t
                                elif mode == 2:
                                    acc += sqrt(t)
                                else:
                                    acc += pow(t, p)
                                if acc > worst:
                                    break
                            if acc <= worst:
                                _insert(acc, pid, bd, bi, &count, k)
                        continue
                    if axis[node] >= 0:
                        proj = queries[q, axis[node]]
                    else:
                        proj = 0.0
                        for c in range(dim):
                            proj += normal[node, c] * queries[q, c]
                    diff = proj - offset[node]
                    if diff <= 0.0:
                        near = left[node]
                        far = right[node]
                    else:
                        near = right[node]
                        far = left[node]
                    pb = fabs(diff) * scale[node]
                    if mode == 0:
                        pb = pb * pb
                    elif mode == 2:
                        pb = sqrt(pb)
                    elif mode == 3:
                        pb = pow(pb, p)
                    stack_node[sp] = far
                    stack_bound[sp] = pb if pb > b else b
                    sp += 1
                    stack_node[sp] = near
                    stack_bound[sp] = b
                    sp += 1
                for j in range(count):
                    ids_v[q, j] = bi[j]
                    dists_v[q, j] = bd[j]
    finally:
        free(stack_node)
        free(stack_bound)
        free(bd)
        free(bi)
    return ids, dists


# ---------------------------------------------------------------- proximal solvers

cdef int _cmp_desc(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*> a)[0]
    cdef double y = (<const double*> b)[0]
    if x < y:
        return 1
    if x > y:
        return -1
    return 0


cdef void _prox_linf(const double* v, double* out, double* buf, Py_ssize_t m, double tau) noexcept nogil:
    """out = prox of tau*||.||_inf at v, i.e. v clipped to [-theta, theta]."""
    cdef Py_ssize_t i
    cdef double s = 0.0, css = 0.0, theta = 0.0, a
    for i in range(m):
        buf[i] = fabs(v[i])
        s += buf[i]
    if s <= tau:
        for i in range(m):
            out[i] = 0.0
        return
    qsort(buf, m, sizeof(double), _cmp_desc)
    for i in range(m):
        css += buf[i]
        if buf[i] - (css - tau) / (i + 1.0) > 0.0:
            theta = (css - tau) / (i + 1.0)
    for i in range(m):
        a = fabs(v[i])
        if a > theta:
            out[i] = theta if v[i] > 0.0 else -theta
        else:
            out[i] = v[i]


cdef inline double _resid(const double[:, ::1] D, const double* a, const double* y,
                          double* r, Py_ssize_t n, Py_ssize_t m) noexcept nogil:
    """r = D a - y; returns 0.5 ||r||^2."""
    cdef Py_ssize_t i, j
    cdef double acc, tot = 0.0
    for i in range(n):
        acc = -y[i]
        for j in range(m):
            acc += D[i, j] * a[j]
        r[i] = acc
        tot += acc * acc
    return 0.5 * tot


cdef inline void _grad_step(const double[:, ::1] D, const double* w, const double* r,
                            double* v, double inv_l, Py_ssize_t n, Py_ssize_t m) noexcept nogil:
    """v = w - D^T r / L."""
    cdef Py_ssize_t i, j
    cdef double acc
    for j in range(m):
        acc = 0.0
        for i in range(n):
            acc += D[i, j] * r[i]
        v[j] = w[j] - acc * inv_l


def ista_l1_batch(const double[:, ::1] D, const double[:, ::1] Y, double lam, double lip,
                  int max_iters, double tol, double[:, ::1] history=None):
    """Iterative shrinkage for 0.5||D a - y||^2 + lam ||a||_1, one row of Y at a time."""
    cdef Py_ssize_t n = D.shape[0], m = D.shape[1], N = Y.shape[0]
    cdef Py_ssize_t row, j, it
    cdef double inv_l = 1.0 / lip, tau = lam / lip, J, Jz, l1, a
    cdef bint record = history is not None
    cdef const double* y

    A = np.zeros((N, m), dtype=np.float64)
    iters = np.zeros(N, dtype=np.int64)
    objs = np.zeros(N, dtype=np.float64)
    cdef double[:, ::1] A_v = A
    cdef int64_t[::1] it_v = iters
    cdef double[::1] obj_v = objs

    cdef double* r = <double*> malloc(n * sizeof(double))
    cdef double* rz = <double*> malloc(n * sizeof(double))
    cdef double* v = <double*> malloc(m * sizeof(double))
    cdef double* z = <double*> malloc(m * sizeof(double))
    if not r or not rz or not v or not z:
        free(r); free(rz); free(v); free(z)
        raise MemoryError()
    try:
        with nogil:
            for row in range(N):
                y = &Y[row, 0]
                J = _resid(D, &A_v[row, 0], y, r, n, m)
                if record:
                    history[row, 0] = J
                it = 0
                while it < max_iters:
                    _grad_step(D, &A_v[row, 0], r, v, inv_l, n, m)
                    l1 = 0.0
                    for j in range(m):
                        a = fabs(v[j]) - tau
                        if a > 0.0:
                            z[j] = a if v[j] > 0.0 else -a
                            l1 += a
                        else:
                            z[j] = 0.0
                    Jz = _resid(D, z, y, rz, n, m) + lam * l1
                    if Jz > J:
                        break
                    it += 1
                    for j in range(m):
                        A_v[row, j] = z[j]
                    for j in range(n):
                        r[j] = rz[j]
                    a = J - Jz
                    J = Jz
                    if record:
                        history[row, it] = J
                    if a <= tol * (J if J > 1e-300 else 1e-300):
                        break
                it_v[row] = it
                obj_v[row] = J
    finally:
        free(r); free(rz); free(v); free(z)
    return A, iters, objs


def mfista_linf_batch(const double[:, ::1] D, const double[:, ::1] Y, double lam, double lip,
                      int max_iters, double tol, double[:, ::1] history=None):
    """Monotone accelerated proximal gradient for 0.5||D a - y||^2 + lam ||a||_inf."""
    cdef Py_ssize_t n = D.shape[0], m = D.shape[1], N = Y.shape[0]
    cdef Py_ssize_t row, j, it
    cdef double inv_l = 1.0 / lip, tau = lam / lip, J, Jz, t, tn, c1, mx, dec
    cdef bint record = history is not None, accepted
    cdef const double* y

    X = np.zeros((N, m), dtype=np.float64)
    iters = np.zeros(N, dtype=np.int64)
    objs = np.zeros(N, dtype=np.float64)
    cdef double[:, ::1] X_v = X
    cdef int64_t[::1] it_v = iters
    cdef double[::1] obj_v = objs

    cdef double* r = <double*> malloc(n * sizeof(double))
    cdef double* w = <double*> malloc(m * sizeof(double))
    cdef double* v = <double*> malloc(m * sizeof(double))
    cdef double* z = <double*> malloc(m * sizeof(double))
    cdef double* buf = <double*> malloc(m * sizeof(double))
    if not r or not w or not v or not z or not buf:
        free(r); free(w); free(v); free(z); free(buf)
        raise MemoryError()
    try:
        with nogil:
            for row in range(N):
                y = &Y[row, 0]
                for j in range(m):
                    w[j] = 0.0
                J = _resid(D, &X_v[row, 0], y, r, n, m)
                if record:
                    history[row, 0] = J
                t = 1.0
                it = 0
                while it < max_iters:
                    _resid(D, w, y, r, n, m)
                    _grad_step(D, w, r, v, inv_l, n, m)
                    _prox_linf(v, z, buf, m, tau)
                    mx = 0.0
                    for j in range(m):
                        if fabs(z[j]) > mx:
                            mx = fabs(z[j])
                    Jz = _resid(D, z, y, r, n, m) + lam * mx
                    tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
                    it += 1
                    accepted = Jz <= J
                    dec = 0.0
                    if accepted:
                        dec = J - Jz
                        c1 = (t - 1.0) / tn
                        for j in range(m):
                            w[j] = z[j] + c1 * (z[j] - X_v[row, j])
                            X_v[row, j] = z[j]
                        J = Jz
                    else:
                        c1 = t / tn
                        for j in range(m):
                            w[j] = X_v[row, j] + c1 * (z[j] - X_v[row, j])
                    t = tn
                    if record:
                        history[row, it] = J
                    if accepted and dec <= tol * (J if J > 1e-300 else 1e-300):
                        break
                it_v[row] = it
                obj_v[row] = J
    finally:
        free(r); free(w); free(v); free(z); free(buf)
    return X, iters, objs
