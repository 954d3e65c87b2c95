# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels; same contracts as ``_pytree``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY, NAN

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64
ctypedef cnp.uint8_t u8


cdef inline double _lse_row(const f64[:] x, const u8[:] ok, double beta) noexcept nogil:
    cdef Py_ssize_t a, A = x.shape[0]
    cdef double m = -INFINITY, s = 0.0
    for a in range(A):
        if ok[a] and x[a] / beta > m:
            m = x[a] / beta
    if m == -INFINITY:
        return -INFINITY
    for a in range(A):
        if ok[a]:
            s += exp(x[a] / beta - m)
    return m + log(s)


def soft_value(q, allowed, double beta):
    cdef const f64[:, :, :] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef const u8[:, :] ok = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef Py_ssize_t P = qv.shape[0], n = qv.shape[1], p, i
    out = np.empty((P, n))
    cdef f64[:, :] ov = out
    with nogil:
        for p in range(P):
            for i in range(n):
                ov[p, i] = beta * _lse_row(qv[p, i], ok[i], beta)
    return out


def log_softmax(z, allowed, double beta):
    cdef const f64[:, :, :] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const u8[:, :] ok = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef Py_ssize_t P = zv.shape[0], n = zv.shape[1], A = zv.shape[2], p, i, a
    cdef double lse
    out = np.empty((P, n, A))
    cdef f64[:, :, :] ov = out
    with nogil:
        for p in range(P):
            for i in range(n):
                lse = _lse_row(zv[p, i], ok[i], beta)
                for a in range(A):
                    ov[p, i, a] = zv[p, i, a] / beta - lse if ok[i, a] else -INFINITY
    return out


def soft_backup(reward, log_ref, child, allowed, double beta):
    cdef const f64[:, :, :] r = np.ascontiguousarray(reward, dtype=np.float64)
    cdef const f64[:, :, :] lr = np.ascontiguousarray(log_ref, dtype=np.float64)
    cdef const i64[:, :] ch = np.ascontiguousarray(child, dtype=np.int64)
    cdef const u8[:, :] ok = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef Py_ssize_t P = r.shape[0], n = r.shape[1], A = r.shape[2], p, i, a
    cdef double cont
    q = np.empty((P, n, A))
    v = np.zeros((P, n))
    cdef f64[:, :, :] qv = q
    cdef f64[:, :] vv = v
    with nogil:
        for p in range(P):
            for i in range(n - 1, -1, -1):
                for a in range(A):
                    if not ok[i, a]:
                        qv[p, i, a] = -INFINITY
                        continue
                    cont = vv[p, ch[i, a]] if ch[i, a] >= 0 else 0.0
                    qv[p, i, a] = r[p, i, a] + beta * lr[p, i, a] + cont
                vv[p, i] = beta * _lse_row(qv[p, i], ok[i], beta)
    return q, v


def bellman_invert(q, log_ref, child, allowed, double beta):
    cdef const f64[:, :, :] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef const f64[:, :, :] lr = np.ascontiguousarray(log_ref, dtype=np.float64)
    cdef const i64[:, :] ch = np.ascontiguousarray(child, dtype=np.int64)
    cdef const u8[:, :] ok = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef Py_ssize_t P = qv.shape[0], n = qv.shape[1], A = qv.shape[2], p, i, a
    cdef double cont
    v = soft_value(q, allowed, beta)
    cdef const f64[:, :] vv = v
    out = np.empty((P, n, A))
    cdef f64[:, :, :] ov = out
    with nogil:
        for p in range(P):
            for i in range(n):
                for a in range(A):
                    if not ok[i, a]:
                        ov[p, i, a] = NAN
                        continue
                    cont = vv[p, ch[i, a]] if ch[i, a] >= 0 else 0.0
                    ov[p, i, a] = qv[p, i, a] - beta * lr[p, i, a] - cont
    return out


def path_sums(vals, parent, parent_action, Py_ssize_t eos):
    cdef const f64[:, :, :] x = np.ascontiguousarray(vals, dtype=np.float64)
    cdef const i64[:] par = np.ascontiguousarray(parent, dtype=np.int64)
    cdef const i64[:] pa = np.ascontiguousarray(parent_action, dtype=np.int64)
    cdef Py_ssize_t P = x.shape[0], n = x.shape[1], p, i
    cum = np.zeros((P, n))
    out = np.empty((P, n))
    cdef f64[:, :] cv = cum
    cdef f64[:, :] ov = out
    with nogil:
        for p in range(P):
            for i in range(1, n):
                cv[p, i] = cv[p, par[i]] + x[p, par[i], pa[i]]
            for i in range(n):
                ov[p, i] = cv[p, i] + x[p, i, eos]
    return out


def subtree_scatter(g_seq, parent, parent_action, Py_ssize_t eos, Py_ssize_t n_actions):
    cdef const f64[:, :] g = np.ascontiguousarray(g_seq, dtype=np.float64)
    cdef const i64[:] par = np.ascontiguousarray(parent, dtype=np.int64)
    cdef const i64[:] pa = np.ascontiguousarray(parent_action, dtype=np.int64)
    cdef Py_ssize_t P = g.shape[0], n = g.shape[1], p, i
    out = np.zeros((P, n, n_actions))
    acc = np.array(g, dtype=np.float64, copy=True)
    cdef f64[:, :, :] ov = out
    cdef f64[:, :] av = acc
    with nogil:
        for p in range(P):
            for i in range(n):
                ov[p, i, eos] = g[p, i]
            for i in range(n - 1, 0, -1):
                ov[p, par[i], pa[i]] += av[p, i]
                av[p, par[i]] += av[p, i]
    return out
