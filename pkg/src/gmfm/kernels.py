"""Backend selection for the per-cell kernels.

The compiled extension ``gmfm._kernels`` is used when it imports; otherwise
the numpy implementation in ``gmfm._kernels_py`` takes over.  Setting
``GMFM_PURE_PYTHON=1`` forces the fallback.  Both backends take arrays of
any shape and return arrays of the same shape.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("GMFM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _flat(codes, x, pi):
    return (
        np.ascontiguousarray(codes, dtype=np.int8).reshape(-1),
        np.ascontiguousarray(x, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(pi, dtype=np.float64).reshape(-1),
    )


def cell_loglik(codes, x, pi, impl=None):
    """Per-cell log-likelihood, same shape as ``pi``."""
    impl = impl or _impl
    shape = np.shape(pi)
    c, xv, p = _flat(codes, x, pi)
    return impl.cell_loglik(c, xv, p).reshape(shape)


def cell_terms(codes, x, pi, impl=None):
    """Per-cell ``(loglik, d1, d2)``, each the same shape as ``pi``."""
    impl = impl or _impl
    shape = np.shape(pi)
    c, xv, p = _flat(codes, x, pi)
    ll, d1, d2 = impl.cell_terms(c, xv, p)
    return ll.reshape(shape), d1.reshape(shape), d2.reshape(shape)


def clamped_terms(codes, x, pi, clamp: float, impl=None):
    """``(loglik, d1, d2)`` with every cell's log-likelihood continued past ``|pi| = clamp``
    by its second-order expansion at the bound.

    Inside the bound the values are exact.  Outside, the continuation stays
    concave and keeps penalising parameters that move the wrong way, where a
    plain clip would make the objective flat.  Gaussian cells are unchanged
    everywhere.
    """
    pi = np.asarray(pi, dtype=np.float64)
    pc = np.clip(pi, -clamp, clamp)
    ll, d1, d2 = cell_terms(codes, x, pc, impl)
    delta = pi - pc
    out = delta != 0.0
    if out.any():
        dl = delta[out]
        ll[out] += d1[out] * dl + 0.5 * d2[out] * dl * dl
        d1[out] += d2[out] * dl
    return ll, d1, d2


def clamped_loglik(codes, x, pi, clamp: float, impl=None):
    """Per-cell log-likelihood with the continuation of :func:`clamped_terms`."""
    pi = np.asarray(pi, dtype=np.float64)
    out = np.abs(pi) > clamp
    if not out.any():
        return cell_loglik(codes, x, pi, impl)
    ll = cell_loglik(codes, x, np.clip(pi, -clamp, clamp), impl)
    codes = np.broadcast_to(codes, pi.shape)
    x = np.broadcast_to(x, pi.shape)
    ll[out] = clamped_terms(codes[out], x[out], pi[out], clamp, impl)[0]
    return ll


def implementations():
    """Available backends by name (used by the benchmark and tests)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover
        pass
    else:
        out["cython"] = _compiled
    return out
