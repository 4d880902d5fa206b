# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot loops: SE-kernel cross approximation,
HODLR matrix-vector products and application of the factor sequence.

Every routine here has a numpy twin in ``_pycore`` with identical
semantics; the test-suite checks them against each other.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef inline double _se(const double[:, ::1] X, Py_ssize_t i, Py_ssize_t j,
                       double rho) noexcept nogil:
    cdef Py_ssize_t k
    cdef double d, s = 0.0
    for k in range(X.shape[1]):
        d = X[i, k] - X[j, k]
        s += d * d
    return exp(-rho * s)


cdef inline void _mv(double* a, int m, int n, double* x, double* y,
                     bint trans, double beta) noexcept nogil:
    # y = A x (trans=0) or y = A^T x (trans=1) for row-major A (m x n)
    cdef char t
    cdef int inc = 1, lda = n
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    if trans:
        t = b'N'
        dgemv(&t, &n, &m, &one, a, &lda, x, &inc, &beta, y, &inc)
    else:
        t = b'T'
        dgemv(&t, &n, &m, &one, a, &lda, x, &inc, &beta, y, &inc)


def aca_se(const double[:, ::1] X, Py_ssize_t r0, Py_ssize_t r1,
           Py_ssize_t c0, Py_ssize_t c1, double rho, double tol,
           Py_ssize_t maxrank, const Py_ssize_t[::1] prow,
           const Py_ssize_t[::1] pcol):
    """Partially pivoted ACA of exp(-rho |x_i - x_j|^2) on rows [r0, r1)
    and columns [c0, c1).  Returns (U, V, converged, probe_err)."""
    cdef Py_ssize_t m = r1 - r0, n = c1 - c0
    cdef Py_ssize_t np_ = prow.shape[0]
    cdef cnp.ndarray[double, ndim=2] Ut_a = np.zeros((maxrank, m))
    cdef cnp.ndarray[double, ndim=2] Vt_a = np.zeros((maxrank, n))
    cdef double[:, ::1] Ut = Ut_a
    cdef double[:, ::1] Vt = Vt_a
    cdef cnp.ndarray[cnp.uint8_t] ur_a = np.zeros(m, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t] uc_a = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] used_r = ur_a
    cdef unsigned char[::1] used_c = uc_a
    cdef Py_ssize_t i = 0, j, jp, l, k = 0, p, worst, nxt
    cdef double piv, a, best, wmax = 0.0, res, umax, vmax
    cdef Py_ssize_t small = 0
    cdef bint converged = False
    cdef double[::1] row = np.empty(n)

    with nogil:
        while k < maxrank:
            for j in range(n):
                a = _se(X, r0 + i, c0 + j, rho)
                for l in range(k):
                    a -= Ut[l, i] * Vt[l, j]
                row[j] = a
            used_r[i] = 1
            jp = -1
            best = -1.0
            for j in range(n):
                if not used_c[j] and fabs(row[j]) > best:
                    best = fabs(row[j])
                    jp = j
            piv = row[jp] if jp >= 0 else 0.0
            umax = 0.0
            vmax = 0.0
            if piv != 0.0:
                for j in range(n):
                    Vt[k, j] = row[j] / piv
                    if fabs(Vt[k, j]) > vmax:
                        vmax = fabs(Vt[k, j])
                used_c[jp] = 1
                for p in range(m):
                    a = _se(X, r0 + p, c0 + jp, rho)
                    for l in range(k):
                        a -= Vt[l, jp] * Ut[l, p]
                    Ut[k, p] = a
                    if fabs(a) > umax:
                        umax = fabs(a)
                k += 1
            # max-norm of the rank-one update, small twice in a row
            if 10.0 * umax * vmax <= tol:
                small += 1
            else:
                small = 0
            if small >= 2 or piv == 0.0:
                wmax = 0.0
                worst = -1
                for p in range(np_):
                    res = _se(X, r0 + prow[p], c0 + pcol[p], rho)
                    for l in range(k):
                        res -= Ut[l, prow[p]] * Vt[l, pcol[p]]
                    if fabs(res) > wmax:
                        wmax = fabs(res)
                        worst = p
                if wmax <= tol:
                    converged = True
                    break
                if not used_r[prow[worst]]:
                    i = prow[worst]
                    continue
            nxt = -1
            best = -1.0
            for p in range(m):
                if not used_r[p]:
                    a = fabs(Ut[k - 1, p]) if k > 0 else 0.0
                    if a > best:
                        best = a
                        nxt = p
            if nxt < 0:
                converged = True
                break
            i = nxt
    return (np.ascontiguousarray(Ut_a[:k].T), np.ascontiguousarray(Vt_a[:k].T),
            bool(converged), wmax)


def se_block(const double[:, ::1] X, Py_ssize_t r0, Py_ssize_t r1,
             Py_ssize_t c0, Py_ssize_t c1, double rho):
    """Dense exp(-rho |x_i - x_j|^2) block."""
    cdef Py_ssize_t i, j
    cdef cnp.ndarray[double, ndim=2] out = np.empty((r1 - r0, c1 - c0))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(r1 - r0):
            for j in range(c1 - c0):
                o[i, j] = _se(X, r0 + i, c0 + j, rho)
    return out


def hodlr_matvec(const double[::1] v, Py_ssize_t levels,
                 const Py_ssize_t[::1] start, const Py_ssize_t[::1] stop,
                 double[::1] dbuf, const Py_ssize_t[::1] doff,
                 const Py_ssize_t[::1] rank, double[::1] lbuf,
                 const Py_ssize_t[::1] uoff, const Py_ssize_t[::1] voff,
                 double scale):
    cdef Py_ssize_t n = v.shape[0]
    cdef cnp.ndarray[double] out_a = np.zeros(n)
    cdef double[::1] y = out_a
    cdef Py_ssize_t p, s, e, c1s, c1e, c2s, c2e, r, nint, q
    cdef Py_ssize_t maxr = 1
    for p in range(rank.shape[0]):
        if rank[p] > maxr:
            maxr = rank[p]
    cdef double[::1] t = np.empty(maxr)
    cdef double[::1] vv = np.array(v)
    nint = (1 << levels) - 1
    with nogil:
        for q in range(nint, 2 * nint + 1):
            s = start[q]
            e = stop[q]
            _mv(&dbuf[doff[q]], <int>(e - s), <int>(e - s), &vv[s], &y[s], 0, 1.0)
        for p in range(nint):
            r = rank[p]
            if r == 0:
                continue
            c1s = start[2 * p + 1]
            c1e = stop[2 * p + 1]
            c2s = start[2 * p + 2]
            c2e = stop[2 * p + 2]
            _mv(&lbuf[voff[p]], <int>(c2e - c2s), <int>r, &vv[c2s], &t[0], 1, 0.0)
            for q in range(r):
                t[q] *= scale
            _mv(&lbuf[uoff[p]], <int>(c1e - c1s), <int>r, &t[0], &y[c1s], 0, 1.0)
            _mv(&lbuf[uoff[p]], <int>(c1e - c1s), <int>r, &vv[c1s], &t[0], 1, 0.0)
            for q in range(r):
                t[q] *= scale
            _mv(&lbuf[voff[p]], <int>(c2e - c2s), <int>r, &t[0], &y[c2s], 0, 1.0)
    return out_a


cdef void _node_op(double* v, Py_ssize_t c1s, Py_ssize_t c1e,
                   Py_ssize_t c2s, Py_ssize_t c2e, Py_ssize_t r,
                   double* q1, double* q2, double* z, bint trans,
                   double* t, double* u) noexcept nogil:
    # v[c] += Q Z Q^T v[c]  (or with Z^T)
    _mv(q1, <int>(c1e - c1s), <int>r, &v[c1s], &t[0], 1, 0.0)
    _mv(q2, <int>(c2e - c2s), <int>r, &v[c2s], &t[r], 1, 0.0)
    _mv(z, <int>(2 * r), <int>(2 * r), t, u, trans, 0.0)
    _mv(q1, <int>(c1e - c1s), <int>r, &u[0], &v[c1s], 0, 1.0)
    _mv(q2, <int>(c2e - c2s), <int>r, &u[r], &v[c2s], 0, 1.0)


def factor_apply(double[::1] v, Py_ssize_t levels,
                 const Py_ssize_t[::1] start, const Py_ssize_t[::1] stop,
                 double[::1] fbuf, const Py_ssize_t[::1] foff,
                 const Py_ssize_t[::1] ioff, const Py_ssize_t[::1] rank,
                 double[::1] nbuf, const Py_ssize_t[::1] q1off,
                 const Py_ssize_t[::1] q2off, const Py_ssize_t[::1] zfoff,
                 const Py_ssize_t[::1] zioff, bint inverse, bint transpose):
    """In-place application of W, W^T, W^-1 or W^-T to v."""
    cdef Py_ssize_t nint = (1 << levels) - 1
    cdef Py_ssize_t p, q, s, e, r, lev, maxr = 1, maxb = 1
    cdef bint top_down = inverse == transpose
    for p in range(nint):
        if rank[p] > maxr:
            maxr = rank[p]
    for q in range(nint, 2 * nint + 1):
        if stop[q] - start[q] > maxb:
            maxb = stop[q] - start[q]
    cdef double[::1] t = np.empty(2 * maxr)
    cdef double[::1] u = np.empty(2 * maxr)
    cdef double[::1] w = np.empty(maxb)
    cdef const Py_ssize_t[::1] zoff = zioff if inverse else zfoff
    cdef const Py_ssize_t[::1] loff = ioff if inverse else foff
    with nogil:
        if top_down:
            for p in range(nint):
                r = rank[p]
                if r > 0:
                    _node_op(&v[0], start[2 * p + 1], stop[2 * p + 1],
                             start[2 * p + 2], stop[2 * p + 2], r,
                             &nbuf[q1off[p]], &nbuf[q2off[p]], &nbuf[zoff[p]],
                             transpose, &t[0], &u[0])
        for q in range(nint, 2 * nint + 1):
            s = start[q]
            e = stop[q]
            _mv(&fbuf[loff[q]], <int>(e - s), <int>(e - s), &v[s], &w[0],
                transpose, 0.0)
            memcpy(&v[s], &w[0], (e - s) * sizeof(double))
        if not top_down:
            for lev in range(levels - 1, -1, -1):
                for p in range((1 << lev) - 1, (1 << (lev + 1)) - 1):
                    r = rank[p]
                    if r > 0:
                        _node_op(&v[0], start[2 * p + 1], stop[2 * p + 1],
                                 start[2 * p + 2], stop[2 * p + 2], r,
                                 &nbuf[q1off[p]], &nbuf[q2off[p]],
                                 &nbuf[zoff[p]], transpose, &t[0], &u[0])
