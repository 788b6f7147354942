"""Pure numpy cell kernels.  Same contract as the compiled ``_kernels`` module."""

import math

import numpy as np
from scipy import special

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _groups(codes):
    # Fast path for the common single-family layout.
    c0 = codes.flat[0] if codes.size else 0
    if codes.size and (codes == c0).all():
        return [(int(c0), slice(None))]
    return [(c, codes == c) for c in range(5) if (codes == c).any()]


def cell_loglik(codes, x, pi):
    out = np.empty(pi.shape)
    for c, m in _groups(codes):
        xs, ps = x[m], pi[m]
        if c == 0:
            out[m] = -0.5 * (xs - ps) ** 2
        elif c == 1:
            out[m] = -np.exp(ps) + xs * ps - special.gammaln(xs + 1.0)
        elif c == 2:
            out[m] = xs * ps - _softplus(ps)
        elif c == 3:
            out[m] = special.log_ndtr((2.0 * xs - 1.0) * ps)
        else:
            pos = xs > 0
            out[m] = np.where(pos, -0.5 * (xs - ps) ** 2, special.log_ndtr(-ps))
    return out


def _probit_terms(q, ps):
    z = q * ps
    lam = _SQRT_2_OVER_PI / special.erfcx(-z * _INV_SQRT2)
    return special.log_ndtr(z), q * lam, -lam * (z + lam)


def cell_terms(codes, x, pi):
    ll = np.empty(pi.shape)
    d1 = np.empty(pi.shape)
    d2 = np.empty(pi.shape)
    for c, m in _groups(codes):
        xs, ps = x[m], pi[m]
        if c == 0:
            r = xs - ps
            ll[m] = -0.5 * r * r
            d1[m] = r
            d2[m] = -1.0
        elif c == 1:
            lam = np.exp(ps)
            ll[m] = -lam + xs * ps - special.gammaln(xs + 1.0)
            d1[m] = xs - lam
            d2[m] = -lam
        elif c == 2:
            p = special.expit(ps)
            ll[m] = xs * ps - _softplus(ps)
            d1[m] = xs - p
            d2[m] = -p * (1.0 - p)
        elif c == 3:
            a, b, h = _probit_terms(2.0 * xs - 1.0, ps)
            ll[m], d1[m], d2[m] = a, b, h
        else:
            pos = xs > 0
            a, b, h = _probit_terms(-1.0, ps)
            r = xs - ps
            ll[m] = np.where(pos, -0.5 * r * r, a)
            d1[m] = np.where(pos, r, b)
            d2[m] = np.where(pos, -1.0, h)
    return ll, d1, d2
