"""Bounded influence functions with an asymmetric (quantile-like) tilt.

The tilted function is ``2 * psi(r) * [tau * I(r > 0) + (1 - tau) * I(r <= 0)]``
so that ``tau = 0.5`` recovers the untilted ``psi``. Three monotone bases are
supported: Huber clipping, the identity, and the sign function.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache as _lru_cache

import numpy as np
from scipy.stats import norm

HUBER = "huber"
IDENTITY = "identity"
SIGN = "sign"

_BASES = (HUBER, IDENTITY, SIGN)

# integer codes shared with the compiled kernels
PSI_HUBER = 0
PSI_IDENTITY = 1
PSI_SIGN = 2

_BASE_CODES = {HUBER: PSI_HUBER, IDENTITY: PSI_IDENTITY, SIGN: PSI_SIGN}


@dataclass(frozen=True)
class PsiSpec:
    """Influence function choice: base family, Huber constant, tilt level."""

    base: str = HUBER
    c: float = 1.345
    tau: float = 0.5

    def __post_init__(self):
        if self.base not in _BASES:
            raise ValueError(f"unknown psi base {self.base!r}; expected one of {_BASES}")
        if self.base == HUBER and not self.c > 0:
            raise ValueError("Huber tuning constant must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly inside (0, 1)")

    @property
    def code(self) -> int:
        return _BASE_CODES[self.base]

    def untilted(self) -> "PsiSpec":
        return PsiSpec(self.base, self.c, 0.5)


def _psi_base(spec: PsiSpec, r: np.ndarray) -> np.ndarray:
    if spec.base == HUBER:
        return np.clip(r, -spec.c, spec.c)
    if spec.base == IDENTITY:
        return np.asarray(r, dtype=float)
    return np.sign(r)


def _tilt(tau: float, r: np.ndarray) -> np.ndarray:
    return np.where(r > 0, 2.0 * tau, 2.0 * (1.0 - tau))


def psi(spec: PsiSpec, r) -> np.ndarray | float:
    """Evaluate the tilted influence function elementwise."""
    arr = np.asarray(r, dtype=float)
    out = _psi_base(spec, arr) * _tilt(spec.tau, arr)
    return out if arr.ndim else float(out)


def psi_deriv(spec: PsiSpec, r) -> np.ndarray | float:
    """Almost-everywhere derivative of :func:`psi` in ``r``.

    At kinks (|r| = c for Huber, r = 0 for the tilt switch) the left-limit
    value is returned, which keeps reweighting deterministic.
    """
    arr = np.asarray(r, dtype=float)
    if spec.base == HUBER:
        # left limit: derivative 1 on (-c, c], 0 elsewhere
        base = np.where((arr > -spec.c) & (arr <= spec.c), 1.0, 0.0)
    elif spec.base == IDENTITY:
        base = np.ones_like(arr)
    else:
        base = np.zeros_like(arr)
    out = base * _tilt(spec.tau, arr)
    return out if arr.ndim else float(out)


def expected_square(spec: PsiSpec) -> float:
    """E[psi(U)^2] for U ~ N(0, 1), via closed form.

    For any symmetric base the tilted second moment splits at zero into
    ``4 tau^2`` and ``4 (1 - tau)^2`` halves of the untilted moment.
    """
    tilt2 = 2.0 * (spec.tau**2 + (1.0 - spec.tau) ** 2)
    if spec.base in (IDENTITY, SIGN):
        return tilt2
    c = spec.c
    untilted = (2.0 * norm.cdf(c) - 1.0) - 2.0 * c * norm.pdf(c) + 2.0 * c * c * norm.sf(c)
    return tilt2 * untilted


@_lru_cache(maxsize=65536)
def expected_square_cached(base: str, c: float, tau: float) -> float:
    """Memoized :func:`expected_square`; hot inside refit loops."""
    return expected_square(PsiSpec(base, c, tau))


def expected_square_quadrature(spec: PsiSpec) -> float:
    """Adaptive-quadrature evaluation of E[psi(U)^2], split at the tilt jump.

    Independent of :func:`expected_square`; used to cross-check it.
    """
    from scipy.integrate import quad

    def integrand(u):
        return psi(spec, u) ** 2 * norm.pdf(u)

    lo, _ = quad(integrand, -np.inf, 0.0, epsabs=1e-13, epsrel=1e-12)
    hi, _ = quad(integrand, 0.0, np.inf, epsabs=1e-13, epsrel=1e-12)
    return lo + hi
