"""Log-gamma, digamma, and multivariate log-Beta kernels.

All probability arithmetic in this library happens in log space; these three
functions are the only transcendental kernels it needs.  They are implemented
from scratch (Lanczos approximation, recurrence + asymptotic series) so the
library carries no dependency beyond numpy, and so the autodiff tape can pair
``log_gamma`` with ``digamma`` as its adjoint.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["log_gamma", "digamma", "log_beta"]

# Lanczos approximation, g = 7, 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.9189385332046727  # ln(2*pi)/2
_LOG_PI = 1.1447298858494002

# Asymptotic series coefficients for digamma: psi(x) ~ ln x - 1/(2x) - sum_k c_k x^(-2k).
_DIGAMMA_TAIL = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def log_gamma(x: float) -> float:
    """ln Gamma(x) for x > 0 via the Lanczos approximation.

    Relative error is below 1e-10 on [1e-3, 1e6]; arguments under 0.5 go
    through the reflection formula to keep that accuracy near zero.
    """
    x = float(x)
    if not x > 0.0:
        raise ValueError(f"log_gamma requires a positive argument, got {x!r}")
    if x < 0.5:
        # ln Gamma(x) = ln(pi / sin(pi x)) - ln Gamma(1 - x)
        return _LOG_PI - math.log(math.sin(math.pi * x)) - _lanczos(1.0 - x)
    return _lanczos(x)


def _lanczos(x: float) -> float:
    z = x - 1.0
    acc = _LANCZOS_COEF[0]
    for i in range(1, 9):
        acc += _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (z + 0.5) * math.log(t) - t + math.log(acc)


def digamma(x: float) -> float:
    """psi(x) = d/dx ln Gamma(x) for x > 0.

    Upward recurrence psi(x) = psi(x+1) - 1/x lifts the argument to >= 6,
    where the asymptotic series is accurate to well under 1e-12 relative.
    """
    x = float(x)
    if not x > 0.0:
        raise ValueError(f"digamma requires a positive argument, got {x!r}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = 0.0
    for c in reversed(_DIGAMMA_TAIL):
        tail = (tail + c) * inv2
    return acc + math.log(x) - 0.5 * inv - tail


def log_beta(alpha) -> float:
    """Multivariate log-Beta: sum_c ln Gamma(alpha_c) - ln Gamma(sum_c alpha_c)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1:
        raise ValueError("log_beta expects a flat concentration vector")
    if not np.all(alpha > 0.0):
        raise ValueError("log_beta requires strictly positive entries")
    total = 0.0
    s = 0.0
    for a in alpha:
        total += log_gamma(float(a))
        s += float(a)
    return total - log_gamma(s)
