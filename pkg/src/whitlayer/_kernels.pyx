# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for batched lower-band-storage matrices.

Every kernel works on a stack of matrices ``bands[b, j, t]`` where row ``j``
holds the ``j``-th sub-diagonal, left aligned. The batch loop releases the GIL
so callers may split a batch across threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fma, sqrt

cnp.import_array()


cdef Py_ssize_t _chol_one(double[:, ::1] a) noexcept nogil:
    cdef Py_ssize_t p = a.shape[0] - 1
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t t, u, j, m
    cdef double w, s, vu
    for t in range(n):
        w = a[0, t]
        if not (w > 0.0):
            return t
        s = sqrt(w)
        a[0, t] = s
        m = p
        if n - t - 1 < m:
            m = n - t - 1
        for u in range(m):
            vu = a[1 + u, t] / w
            for j in range(p - u):
                a[j, t + 1 + u] -= a[1 + u + j, t] * vu
        for j in range(1, p + 1):
            a[j, t] /= s
    return -1


def cholesky_banded(double[:, :, ::1] bands):
    """Factorize every matrix of the stack in place.

    Returns an int64 array holding, per matrix, the column of the first
    non-positive pivot or -1 on success.
    """
    cdef Py_ssize_t nb = bands.shape[0]
    cdef Py_ssize_t b
    info = np.full(nb, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] info_v = info
    with nogil:
        for b in range(nb):
            info_v[b] = _chol_one(bands[b])
    return info


cdef void _solve_one(double[:, ::1] a, double[:, ::1] x) noexcept nogil:
    cdef Py_ssize_t p = a.shape[0] - 1
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t nc = x.shape[0]
    cdef Py_ssize_t c, t, j
    cdef double acc
    for c in range(nc):
        for t in range(n):
            acc = x[c, t]
            for j in range(1, p + 1):
                if j > t:
                    break
                acc -= a[j, t - j] * x[c, t - j]
            x[c, t] = acc / a[0, t]
        for t in range(n - 1, -1, -1):
            acc = x[c, t]
            for j in range(1, p + 1):
                if t + j >= n:
                    break
                acc -= a[j, t] * x[c, t + j]
            x[c, t] = acc / a[0, t]


def solve_banded(double[:, :, ::1] bands, double[:, :, ::1] rhs):
    """Solve ``L L^T x = rhs`` in place for factored ``bands``.

    ``rhs`` has shape ``(batch, nrhs, n)``.
    """
    cdef Py_ssize_t nb = bands.shape[0]
    cdef Py_ssize_t b
    with nogil:
        for b in range(nb):
            _solve_one(bands[b], rhs[b])


cdef void _matvec_one(double[:, ::1] a, double[:, ::1] v, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t p = a.shape[0] - 1
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t nc = v.shape[0]
    cdef Py_ssize_t c, t, j
    cdef double acc
    for c in range(nc):
        for t in range(n):
            acc = a[0, t] * v[c, t]
            for j in range(1, p + 1):
                if t + j < n:
                    acc += a[j, t] * v[c, t + j]
                if t >= j:
                    acc += a[j, t - j] * v[c, t - j]
            out[c, t] = acc


def matvec_banded(double[:, :, ::1] bands, double[:, :, ::1] v):
    """Symmetric product ``A v`` for raw band storage; ``v`` is ``(batch, nrhs, n)``."""
    cdef Py_ssize_t nb = bands.shape[0]
    cdef Py_ssize_t b
    out = np.empty_like(np.asarray(v))
    cdef double[:, :, ::1] out_v = out
    with nogil:
        for b in range(nb):
            _matvec_one(bands[b], v[b], out_v[b])
    return out


cdef void _residual_one(double[:, ::1] a, double[:, ::1] x, double[:, ::1] b,
                        double[:, ::1] out) noexcept nogil:
    # compensated dot product: each a*x is split exactly into p + e with an
    # FMA and the running sum carries its rounding error, so the result is as
    # accurate as if accumulated in twice the working precision
    cdef Py_ssize_t p = a.shape[0] - 1
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t nc = x.shape[0]
    cdef Py_ssize_t c, t, j, k
    cdef double s, comp, prod, err, new, virt, coef, xv
    for c in range(nc):
        for t in range(n):
            s = b[c, t]
            comp = 0.0
            for k in range(-p, p + 1):
                if t + k < 0 or t + k >= n:
                    continue
                if k >= 0:
                    coef = a[k, t]
                else:
                    coef = a[-k, t + k]
                xv = x[c, t + k]
                prod = coef * xv
                err = fma(coef, xv, -prod)
                new = s - prod
                virt = new - s
                comp += ((s - (new - virt)) + (-prod - virt)) - err
                s = new
            out[c, t] = s + comp


def residual_banded(double[:, :, ::1] bands, double[:, :, ::1] x, double[:, :, ::1] b):
    """Accurately rounded residual ``b - A x`` for raw band storage.

    ``x`` and ``b`` are ``(batch, nrhs, n)``.
    """
    cdef Py_ssize_t nb = bands.shape[0]
    cdef Py_ssize_t i
    out = np.empty_like(np.asarray(x))
    cdef double[:, :, ::1] out_v = out
    with nogil:
        for i in range(nb):
            _residual_one(bands[i], x[i], b[i], out_v[i])
    return out


cdef inline void _two_sum(double a, double b, double* s, double* e) noexcept nogil:
    cdef double v
    s[0] = a + b
    v = s[0] - a
    e[0] = (a - (s[0] - v)) + (b - v)


cdef void _difference_one(const double[:, ::1] rows, const double[:, ::1] hi,
                          const double[:, ::1] lo,
                          double[:, ::1] out_hi, double[:, ::1] out_lo) noexcept nogil:
    cdef Py_ssize_t nr = rows.shape[0]
    cdef Py_ssize_t w = rows.shape[1]
    cdef Py_ssize_t nc = hi.shape[0]
    cdef Py_ssize_t c, r, j
    cdef double s, comp, prod, err, new, q, coef
    for c in range(nc):
        for r in range(nr):
            s = 0.0
            comp = 0.0
            for j in range(w):
                coef = rows[r, j]
                prod = coef * hi[c, r + j]
                err = fma(coef, hi[c, r + j], -prod)
                _two_sum(s, prod, &new, &q)
                s = new
                comp += q + err + coef * lo[c, r + j]
            _two_sum(s, comp, &out_hi[c, r], &out_lo[c, r])


def difference_dd(const double[:, :, ::1] rows, const double[:, :, ::1] hi,
                  const double[:, :, ::1] lo):
    """Compensated ``D (hi + lo)`` as a normalized pair.

    ``rows`` is ``(batch, R, w)`` in difference-row storage; ``hi`` and ``lo``
    are ``(batch, nrhs, T)``.
    """
    cdef Py_ssize_t nb = rows.shape[0]
    cdef Py_ssize_t b
    shape = (nb, hi.shape[1], rows.shape[1])
    out_hi = np.empty(shape)
    out_lo = np.empty(shape)
    cdef double[:, :, ::1] oh = out_hi
    cdef double[:, :, ::1] ol = out_lo
    with nogil:
        for b in range(nb):
            _difference_one(rows[b], hi[b], lo[b], oh[b], ol[b])
    return out_hi, out_lo


cdef void _operator_residual_one(const double[:, ::1] rows, const double[::1] mask,
                                 const double[::1] lam, const double[:, ::1] rhs,
                                 const double[:, ::1] hi, const double[:, ::1] lo,
                                 double[:, ::1] s_hi, double[:, ::1] s_lo,
                                 double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t nr = rows.shape[0]
    cdef Py_ssize_t w = rows.shape[1]
    cdef Py_ssize_t n = hi.shape[1]
    cdef Py_ssize_t nc = hi.shape[0]
    cdef Py_ssize_t c, t, r, r0, r1
    cdef double s, comp, prod, err, new, q, coef, p, e
    # weighted differences lam * D (hi + lo), kept as pairs
    _difference_one(rows, hi, lo, s_hi, s_lo)
    for c in range(nc):
        for r in range(nr):
            p = lam[r] * s_hi[c, r]
            e = fma(lam[r], s_hi[c, r], -p) + lam[r] * s_lo[c, r]
            _two_sum(p, e, &s_hi[c, r], &s_lo[c, r])
    for c in range(nc):
        for t in range(n):
            # mask entries are 0 or 1, so mask * hi is exact
            _two_sum(rhs[c, t], -mask[t] * hi[c, t], &s, &comp)
            comp -= mask[t] * lo[c, t]
            r0 = t - w + 1
            if r0 < 0:
                r0 = 0
            r1 = t
            if r1 > nr - 1:
                r1 = nr - 1
            for r in range(r0, r1 + 1):
                coef = rows[r, t - r]
                prod = coef * s_hi[c, r]
                err = fma(coef, s_hi[c, r], -prod)
                _two_sum(s, -prod, &new, &q)
                s = new
                comp += q - err - coef * s_lo[c, r]
            out[c, t] = s + comp


def operator_residual(const double[:, :, ::1] rows, const double[:, ::1] mask,
                      const double[:, ::1] lam, const double[:, :, ::1] rhs,
                      const double[:, :, ::1] hi, const double[:, :, ::1] lo):
    """Compensated ``rhs - (W + D^T diag(lam) D) (hi + lo)``, rounded once.

    ``mask`` is ``(batch, T)``, ``lam`` is ``(batch, R)`` and the vectors are
    ``(batch, nrhs, T)``.
    """
    cdef Py_ssize_t nb = rows.shape[0]
    cdef Py_ssize_t b
    scratch = np.empty((2, nb, hi.shape[1], rows.shape[1]))
    cdef double[:, :, :, ::1] sv = scratch
    out = np.empty_like(np.asarray(hi))
    cdef double[:, :, ::1] ov = out
    with nogil:
        for b in range(nb):
            _operator_residual_one(rows[b], mask[b], lam[b], rhs[b], hi[b], lo[b],
                                   sv[0, b], sv[1, b], ov[b])
    return out
