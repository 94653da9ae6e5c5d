"""Order-statistic constants for maxout initialization.

Three constants drive every bound in this package, each a function of the
maxout rank K:

* ``S``: mean of the smallest of K chi-squared(1) draws,
* ``L``: mean of the largest of K chi-squared(1) draws,
* ``M``: second moment of the largest of K standard Gaussian draws.

They are evaluated by adaptive quadrature on the half-line after mapping
``[0, inf)`` onto ``[0, 1)`` with ``x = t / (1 - t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, special

K_MIN = 2
K_MAX = 100
QUAD_ABS_TOL = 1e-9

ORDER_STAT_KINDS = ("max_chisq1", "min_chisq1", "max_gauss")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class InvalidRankError(ValueError):
    """Raised for a maxout rank outside the supported range."""


class QuadratureError(ArithmeticError):
    """Raised when adaptive quadrature does not reach the requested tolerance."""

    def __init__(self, name: str, achieved: float, tol: float):
        super().__init__(
            f"quadrature for {name} did not converge: "
            f"estimated error {achieved:.3e} > tolerance {tol:.1e}"
        )
        self.achieved = achieved
        self.tol = tol


@dataclass(frozen=True)
class OrderStatConstants:
    K: int
    S: float
    L: float
    M: float

    @property
    def recommended_c(self) -> float:
        return 1.0 / self.M


def _check_rank(K: int) -> int:
    if isinstance(K, bool) or int(K) != K:
        raise InvalidRankError(f"maxout rank must be an integer, got {K!r}")
    K = int(K)
    if not K_MIN <= K <= K_MAX:
        raise InvalidRankError(f"maxout rank must lie in [{K_MIN}, {K_MAX}], got {K}")
    return K


def half_line_integral(f: Callable[[float], float], name: str = "integral",
                       tol: float = QUAD_ABS_TOL) -> float:
    """Integrate ``f`` over ``[0, inf)`` via the map ``x = t / (1 - t)``."""

    def g(t: float) -> float:
        if t >= 1.0:
            return 0.0
        s = 1.0 - t
        return f(t / s) / (s * s)

    value, abserr, info, *rest = integrate.quad(
        g, 0.0, 1.0, epsabs=tol, epsrel=0.0, limit=500, full_output=True
    )
    # quad reports ier != 0 when the error estimate misses the target
    if rest or abserr > 10 * tol or not math.isfinite(value):
        raise QuadratureError(name, abserr, tol)
    return value


# pdfs ----------------------------------------------------------------------

def chisq1_max_pdf(x: float, K: int) -> float:
    if x <= 0.0:
        return 0.0
    return K * special.erf(math.sqrt(x / 2.0)) ** (K - 1) * math.exp(-x / 2.0) * _INV_SQRT_2PI / math.sqrt(x)


def chisq1_min_pdf(x: float, K: int) -> float:
    if x <= 0.0:
        return 0.0
    return K * special.erfc(math.sqrt(x / 2.0)) ** (K - 1) * math.exp(-x / 2.0) * _INV_SQRT_2PI / math.sqrt(x)


def gauss_max_pdf(x: float, K: int) -> float:
    # K * Phi(x)^(K-1) * phi(x), identical to the erf form (1 + erf(x/sqrt2))^(K-1) / 2^(K-1)
    return K * special.ndtr(x) ** (K - 1) * math.exp(-x * x / 2.0) * _INV_SQRT_2PI


def whole_line_integral(f: Callable[[float], float], name: str) -> float:
    """Integrate over the real line as two mapped half-lines."""
    return half_line_integral(f, name) + half_line_integral(lambda x: f(-x), name)


def pdf_masses(K: int) -> dict[str, float]:
    """Total mass of each order-statistic pdf; used as a quadrature self-check."""
    K = _check_rank(K)
    return {
        "max_chisq1": half_line_integral(lambda x: chisq1_max_pdf(x, K), "max_chisq1 pdf"),
        "min_chisq1": half_line_integral(lambda x: chisq1_min_pdf(x, K), "min_chisq1 pdf"),
        "max_gauss": whole_line_integral(lambda x: gauss_max_pdf(x, K), "max_gauss pdf"),
    }


@lru_cache(maxsize=None)
def compute_constants(K: int) -> OrderStatConstants:
    """Evaluate S, L and M for rank ``K`` by quadrature."""
    K = _check_rank(K)
    S = half_line_integral(lambda x: x * chisq1_min_pdf(x, K), "S")
    L = half_line_integral(lambda x: x * chisq1_max_pdf(x, K), "L")
    M = whole_line_integral(lambda x: x * x * gauss_max_pdf(x, K), "M")
    return OrderStatConstants(K=K, S=S, L=L, M=M)


def recommended_c(K: int) -> float:
    """Maxout initialization constant ``c = 1 / M``."""
    return compute_constants(K).recommended_c


def bound_stabilizing_range(K: int) -> tuple[float, float]:
    """Range ``(1/L, 1/S)`` of scales that can stabilize the Jacobian mean."""
    const = compute_constants(K)
    return 1.0 / const.L, 1.0 / const.S


def sample_order_stat(kind: str, K: int, rng: np.random.Generator, size=None):
    """Draw the min or max of ``K`` i.i.d. base variables.

    ``kind`` is one of ``max_chisq1``, ``min_chisq1`` (base: squared standard
    Gaussian) or ``max_gauss`` (base: standard Gaussian). Returns a float when
    ``size`` is None, otherwise an array of that shape. ``K = 1`` is accepted
    and yields the base distribution itself.
    """
    if kind not in ORDER_STAT_KINDS:
        raise ValueError(f"unknown order statistic {kind!r}; expected one of {ORDER_STAT_KINDS}")
    if isinstance(K, bool) or int(K) != K or K < 1:
        raise InvalidRankError(f"sample size must be a positive integer, got {K!r}")
    shape = () if size is None else (size if isinstance(size, tuple) else (size,))
    g = rng.standard_normal(shape + (int(K),))
    if kind == "max_gauss":
        out = g.max(axis=-1)
    else:
        sq = g * g
        out = sq.max(axis=-1) if kind == "max_chisq1" else sq.min(axis=-1)
    return float(out) if size is None else out


def constants_table(k_min: int = 2, k_max: int = 10) -> list[dict[str, float]]:
    rows = []
    for K in range(k_min, k_max + 1):
        const = compute_constants(K)
        rows.append({"K": K, "S": const.S, "L": const.L, "M": const.M,
                     "recommended_c": const.recommended_c})
    return rows
