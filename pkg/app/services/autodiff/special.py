"""
Special Functions

Log-gamma by the Lanczos approximation (g=7, 9 coefficients) and digamma by
upward recurrence plus the asymptotic series. Both work elementwise on
float64 numpy arrays for strictly positive arguments.
"""

import numpy as np

from app.core.errors import DomainError

LANCZOS_G = 7.0
LANCZOS_COEFFS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Recurrence shifts digamma arguments up to this point before the series
_DIGAMMA_ASYMPTOTIC_FROM = 6.0


def _check_positive(x: np.ndarray, name: str) -> None:
    if np.any(~(x > 0.0)):
        bad = x[~(x > 0.0)].ravel()[0]
        raise DomainError(f"{name} requires x > 0, got {bad!r}")


def _lgamma_lanczos(x: np.ndarray) -> np.ndarray:
    # valid for x >= 0.5
    z = x - 1.0
    series = np.full_like(z, LANCZOS_COEFFS[0])
    for k in range(1, LANCZOS_COEFFS.size):
        series = series + LANCZOS_COEFFS[k] / (z + k)
    t = z + LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)


def lgamma(x) -> np.ndarray:
    """log Γ(x) for x > 0.

    Raises:
        DomainError: If any element is not strictly positive
    """
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "lgamma")
    out = np.empty_like(x)
    big = x >= 0.5
    out[big] = _lgamma_lanczos(x[big])
    small = ~big
    if np.any(small):
        # reflection: Γ(x)Γ(1-x) = π / sin(πx)
        xs = x[small]
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lgamma_lanczos(1.0 - xs)
    return out


def digamma(x) -> np.ndarray:
    """ψ(x) = d/dx log Γ(x) for x > 0."""
    x = np.array(x, dtype=np.float64, copy=True)
    _check_positive(x, "digamma")
    acc = np.zeros_like(x)
    low = x < _DIGAMMA_ASYMPTOTIC_FROM
    while np.any(low):
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
        low = x < _DIGAMMA_ASYMPTOTIC_FROM

    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + np.log(x) - 0.5 * inv - tail
