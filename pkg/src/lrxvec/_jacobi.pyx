# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi kernel.

Operates in place on ``g`` (n x m, row j is column j of the matrix being
orthogonalized) and ``vt`` (n x n, accumulated right rotations). Pairs are
visited in cyclic row order.
"""

from libc.math cimport fabs, sqrt


cdef inline double _dot(double[:, ::1] a, Py_ssize_t p, Py_ssize_t q, Py_ssize_t m) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(m):
        s += a[p, i] * a[q, i]
    return s


cdef inline void _rotate(double[:, ::1] a, Py_ssize_t p, Py_ssize_t q, Py_ssize_t m,
                         double c, double s) noexcept nogil:
    cdef Py_ssize_t i
    cdef double x, y
    for i in range(m):
        x = a[p, i]
        y = a[q, i]
        a[p, i] = c * x - s * y
        a[q, i] = s * x + c * y


def jacobi_sweeps(double[:, ::1] g, double[:, ::1] vt, double tol, int max_sweeps):
    """Run sweeps until no pair exceeds ``tol``; return the sweep count or -1."""
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t m = g.shape[1]
    cdef Py_ssize_t p, q
    cdef double alpha, beta, gamma, zeta, t, c, s
    cdef int sweep, rotated
    cdef int done = -1
    with nogil:
        for sweep in range(max_sweeps):
            rotated = 0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = _dot(g, p, p, m)
                    beta = _dot(g, q, q, m)
                    gamma = _dot(g, p, q, m)
                    if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                        continue
                    rotated = 1
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    _rotate(g, p, q, m, c, s)
                    _rotate(vt, p, q, n, c, s)
            if not rotated:
                done = sweep + 1
                break
    return done
