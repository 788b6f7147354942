"""Likelihood families for individual matrix cells.

Every cell ``x_ijt`` has a log-density ``l(pi)`` in its natural parameter
``pi = r_i' F_t c_j``.  Five families are supported; none carries a free
dispersion parameter.

The scalar functions here (:func:`loglik_cell`, :func:`derivatives_cell`, ...)
validate their inputs and are meant for tests and small computations.  The
estimation code works on whole arrays through :mod:`gmfm.kernels`, which
evaluates the same closed forms with a family-code array.
"""

from __future__ import annotations

import enum
import math
from typing import NamedTuple

import numpy as np
from scipy import special

__all__ = [
    "FamilyKind",
    "CellDerivatives",
    "FamilyDomainError",
    "loglik_cell",
    "derivatives_cell",
    "curvature_bound",
    "sample_cell",
    "sample_array",
    "family_mean",
]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class FamilyKind(enum.IntEnum):
    """Family tag.  The integer value is the code used by the array kernels."""

    GAUSSIAN = 0
    POISSON = 1
    LOGIT = 2
    PROBIT = 3
    TOBIT = 4

    @property
    def tag(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | FamilyKind") -> "FamilyKind":
        if isinstance(value, FamilyKind):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown family tag {value!r}") from None
        return cls(int(value))

    def __str__(self) -> str:
        return self.tag


class CellDerivatives(NamedTuple):
    loglik: float
    d1: float
    d2: float


class FamilyDomainError(ValueError):
    """An observation lies outside the support of its family."""

    def __init__(self, family: FamilyKind, x: float, where: str = ""):
        self.family = family
        self.x = x
        loc = f" at {where}" if where else ""
        super().__init__(f"value {x!r} is outside the support of family '{family.tag}'{loc}")


def _check(family: FamilyKind, x: float, pi: float) -> None:
    if not math.isfinite(pi):
        raise ValueError(f"natural parameter must be finite, got {pi!r}")
    if not math.isfinite(x):
        raise FamilyDomainError(family, x)
    if family is FamilyKind.POISSON:
        if x < 0 or x != math.floor(x):
            raise FamilyDomainError(family, x)
    elif family in (FamilyKind.LOGIT, FamilyKind.PROBIT):
        if x not in (0.0, 1.0):
            raise FamilyDomainError(family, x)
    elif family is FamilyKind.TOBIT:
        if x < 0:
            raise FamilyDomainError(family, x)


def _mills(z: float) -> float:
    """phi(z) / Phi(z), stable in both tails."""
    return _SQRT_2_OVER_PI / special.erfcx(-z / math.sqrt(2.0))


def loglik_cell(family: "FamilyKind | str", x: float, pi: float) -> float:
    """Log-density of one observation at natural parameter ``pi``."""
    family = FamilyKind.parse(family)
    x = float(x)
    pi = float(pi)
    _check(family, x, pi)
    if family is FamilyKind.GAUSSIAN:
        return -0.5 * (x - pi) ** 2
    if family is FamilyKind.POISSON:
        return -math.exp(pi) + x * pi - math.lgamma(x + 1.0)
    if family is FamilyKind.LOGIT:
        # log Psi(pi) = -log1p(exp(-pi)), written to avoid overflow on either side
        return x * pi - (max(pi, 0.0) + math.log1p(math.exp(-abs(pi))))
    if family is FamilyKind.PROBIT:
        q = 2.0 * x - 1.0
        return float(special.log_ndtr(q * pi))
    # Tobit
    if x > 0:
        return -0.5 * (x - pi) ** 2
    return float(special.log_ndtr(-pi))


def derivatives_cell(family: "FamilyKind | str", x: float, pi: float) -> CellDerivatives:
    """Log-density with its first and second derivative in ``pi``."""
    family = FamilyKind.parse(family)
    ll = loglik_cell(family, x, pi)
    x = float(x)
    pi = float(pi)
    if family is FamilyKind.GAUSSIAN:
        return CellDerivatives(ll, x - pi, -1.0)
    if family is FamilyKind.POISSON:
        lam = math.exp(pi)
        return CellDerivatives(ll, x - lam, -lam)
    if family is FamilyKind.LOGIT:
        p = float(special.expit(pi))
        return CellDerivatives(ll, x - p, -p * (1.0 - p))
    if family is FamilyKind.TOBIT and x > 0:
        return CellDerivatives(ll, x - pi, -1.0)
    # probit, or a censored tobit cell (which is a probit "failure" term)
    q = 2.0 * x - 1.0 if family is FamilyKind.PROBIT else -1.0
    z = q * pi
    lam = _mills(z)
    return CellDerivatives(ll, q * lam, -lam * (z + lam))


def _tobit_censored_curvature(pi_bound: float) -> float:
    grid = np.arange(-pi_bound, pi_bound + 5e-4, 1e-3)
    z = -grid
    lam = _SQRT_2_OVER_PI / special.erfcx(-z / math.sqrt(2.0))
    return float(np.max(lam * (z + lam)))


def curvature_bound(family: "FamilyKind | str", pi_bound: float) -> float:
    """Upper bound ``b_U`` on ``-d2`` over the support and ``|pi| <= pi_bound``.

    Logit and probit use the textbook global constants (1/4 and 1).  The
    Poisson value ``exp(pi_bound)`` and the Tobit value are only valid on
    the clamped domain.
    """
    family = FamilyKind.parse(family)
    if not (pi_bound > 0 and math.isfinite(pi_bound)):
        raise ValueError(f"pi_bound must be positive and finite, got {pi_bound!r}")
    if family is FamilyKind.LOGIT:
        return 0.25
    if family in (FamilyKind.PROBIT, FamilyKind.GAUSSIAN):
        return 1.0
    if family is FamilyKind.POISSON:
        return math.exp(pi_bound)
    # Tobit: uncensored cells have -d2 = 1, censored cells are searched on a grid
    return max(1.0, _tobit_censored_curvature(pi_bound))


def sample_cell(
    family: "FamilyKind | str",
    pi: float,
    rng: np.random.Generator,
    scale: float = 1.0,
) -> float:
    """Draw one observation.  ``scale`` is the Gaussian noise sd (heteroscedastic designs)."""
    family = FamilyKind.parse(family)
    if not math.isfinite(pi):
        raise ValueError(f"natural parameter must be finite, got {pi!r}")
    return float(sample_array(np.full(1, family, dtype=np.int8), np.array([pi]), rng, scale)[0])


def sample_array(
    codes: np.ndarray,
    pi: np.ndarray,
    rng: np.random.Generator,
    scale: "float | np.ndarray" = 1.0,
) -> np.ndarray:
    """Vectorised :func:`sample_cell` over arrays of family codes and natural parameters.

    One uniform and one normal variate are drawn per cell regardless of
    family so that the stream consumption does not depend on the layout.
    """
    codes = np.asarray(codes)
    pi = np.asarray(pi, dtype=float)
    shape = np.broadcast(codes, pi).shape
    codes = np.broadcast_to(codes, shape)
    pi = np.broadcast_to(pi, shape)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), shape)
    noise = rng.standard_normal(shape)
    out = np.empty(shape)

    m = codes == FamilyKind.GAUSSIAN
    out[m] = pi[m] + scale[m] * noise[m]
    m = codes == FamilyKind.TOBIT
    out[m] = np.maximum(0.0, pi[m] + noise[m])

    u = rng.random(shape)
    m = codes == FamilyKind.LOGIT
    out[m] = (u[m] < special.expit(pi[m])).astype(float)
    m = codes == FamilyKind.PROBIT
    out[m] = (u[m] < special.ndtr(pi[m])).astype(float)

    m = codes == FamilyKind.POISSON
    if m.any():
        out[m] = rng.poisson(np.exp(pi[m]))
    return out


def family_mean(codes: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Conditional mean E[x | pi] per cell (used to reconstruct data)."""
    codes = np.asarray(codes)
    pi = np.asarray(pi, dtype=float)
    codes, pi = np.broadcast_arrays(codes, pi)
    out = np.array(pi, dtype=float, copy=True)
    m = codes == FamilyKind.POISSON
    out[m] = np.exp(pi[m])
    m = codes == FamilyKind.LOGIT
    out[m] = special.expit(pi[m])
    m = codes == FamilyKind.PROBIT
    out[m] = special.ndtr(pi[m])
    m = codes == FamilyKind.TOBIT
    if m.any():
        # E[max(0, pi + e)] = pi * Phi(pi) + phi(pi)
        p = pi[m]
        out[m] = p * special.ndtr(p) + np.exp(-0.5 * p * p) / math.sqrt(2 * math.pi)
    return out


def validate_support(codes: np.ndarray, x: np.ndarray, observed: "np.ndarray | None" = None) -> None:
    """Raise :class:`FamilyDomainError` naming the first offending cell, if any.

    ``x`` has layout (T, p1, p2); reported coordinates are 1-based (t, i, j).
    """
    x = np.asarray(x, dtype=float)
    ok = np.isfinite(x)
    pois = codes == FamilyKind.POISSON
    ok &= ~pois | ((x >= 0) & (x == np.floor(np.where(np.isfinite(x), x, 0.0))))
    binary = (codes == FamilyKind.LOGIT) | (codes == FamilyKind.PROBIT)
    ok &= ~binary | (x == 0) | (x == 1)
    ok &= ~(codes == FamilyKind.TOBIT) | (x >= 0)
    if observed is not None:
        ok |= ~observed
    if not ok.all():
        idx = tuple(int(v[0]) for v in np.nonzero(~ok))
        fam = FamilyKind(int(codes[idx]))
        where = "(t,i,j)=" + ",".join(str(v + 1) for v in idx)
        raise FamilyDomainError(fam, float(x[idx]), where)
