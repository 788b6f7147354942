# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled cell kernels: fused per-cell log-likelihood and derivatives.

Inputs are flat, C-contiguous arrays of equal length.  Family codes follow
``gmfm.families.FamilyKind``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs, sqrt, M_PI
from scipy.special.cython_special cimport erfcx, gammaln, log_ndtr

cnp.import_array()

cdef double SQRT_2_OVER_PI = sqrt(2.0 / M_PI)
cdef double INV_SQRT2 = 1.0 / sqrt(2.0)


cdef inline double _softplus(double z) nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline double _loglik(signed char c, double x, double p) nogil:
    cdef double r
    if c == 0:
        r = x - p
        return -0.5 * r * r
    elif c == 1:
        return -exp(p) + x * p - gammaln(x + 1.0)
    elif c == 2:
        return x * p - _softplus(p)
    elif c == 3:
        return log_ndtr((2.0 * x - 1.0) * p)
    else:
        if x > 0:
            r = x - p
            return -0.5 * r * r
        return log_ndtr(-p)


def cell_loglik(const signed char[::1] codes, const double[::1] x, const double[::1] pi):
    cdef Py_ssize_t n = pi.shape[0], k
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for k in range(n):
            o[k] = _loglik(codes[k], x[k], pi[k])
    return out


def cell_terms(const signed char[::1] codes, const double[::1] x, const double[::1] pi):
    cdef Py_ssize_t n = pi.shape[0], k
    cdef double xv, p, r, lam, q, z, pr
    cdef signed char c
    ll_a = np.empty(n)
    d1_a = np.empty(n)
    d2_a = np.empty(n)
    cdef double[::1] ll = ll_a, d1 = d1_a, d2 = d2_a
    with nogil:
        for k in range(n):
            c = codes[k]
            xv = x[k]
            p = pi[k]
            if c == 0 or (c == 4 and xv > 0):
                r = xv - p
                ll[k] = -0.5 * r * r
                d1[k] = r
                d2[k] = -1.0
            elif c == 1:
                lam = exp(p)
                ll[k] = -lam + xv * p - gammaln(xv + 1.0)
                d1[k] = xv - lam
                d2[k] = -lam
            elif c == 2:
                if p >= 0:
                    pr = 1.0 / (1.0 + exp(-p))
                else:
                    pr = exp(p) / (1.0 + exp(p))
                ll[k] = xv * p - _softplus(p)
                d1[k] = xv - pr
                d2[k] = -pr * (1.0 - pr)
            else:
                if c == 3:
                    q = 2.0 * xv - 1.0
                else:
                    q = -1.0
                z = q * p
                lam = SQRT_2_OVER_PI / erfcx(-z * INV_SQRT2)
                ll[k] = log_ndtr(z)
                d1[k] = q * lam
                d2[k] = -lam * (z + lam)
    return ll_a, d1_a, d2_a
