"""Closed-form moments and bounds for randomly initialized maxout networks.

Every function here is a pure evaluation of a formula in the architecture,
the scale ``c``, the rank ``K``, the input and a moment order ``t``. The
Monte-Carlo estimators check their output against these values.

Depth follows :class:`~maxoutlab.network.Architecture`: ``L`` counts hidden
layers plus the output layer, so exponents of the form ``L - 1`` count hidden
layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .network import Architecture
from .order_stats import compute_constants


class BoundPreconditionError(ValueError):
    """Raised when a bound is requested outside its assumptions."""


@dataclass(frozen=True)
class BoundReport:
    quantity: str
    upper: float
    lower: Optional[float] = None
    exact: Optional[float] = None
    variance_upper: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = -math.inf if self.lower is None else self.lower
        hi = self.upper
        if lo > hi * (1 + 1e-12):
            raise ArithmeticError(f"{self.quantity}: lower bound {lo} exceeds upper {hi}")
        if self.exact is not None and not lo * (1 - 1e-12) <= self.exact <= hi * (1 + 1e-12):
            raise ArithmeticError(f"{self.quantity}: exact value {self.exact} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "lower": self.lower, "upper": self.upper,
                "exact": self.exact, "variance_upper": self.variance_upper, **self.params}


@dataclass(frozen=True)
class AugmentedInput:
    """The input with a constant 1 appended, as seen by a layer with biases."""

    frak_x: np.ndarray

    @classmethod
    def from_input(cls, x) -> "AugmentedInput":
        x = np.asarray(x, dtype=np.float64).ravel()
        return cls(np.append(x, 1.0))

    @property
    def sq_norm(self) -> float:
        return float(self.frak_x @ self.frak_x)


def _check_t(t: int) -> int:
    if isinstance(t, bool) or int(t) != t or t < 1:
        raise ValueError(f"moment order t must be an integer >= 1, got {t!r}")
    return int(t)


def _width_sum(widths) -> float:
    return float(sum(1.0 / n for n in widths))


def _echo(arch: Architecture, c: float, t: Optional[int] = None) -> dict:
    out = {"n0": arch.n0, "widths": list(arch.widths), "nL": arch.nL, "K": arch.K,
           "c": c, "depth": arch.depth}
    if t is not None:
        out["t"] = t
    return out


def jacobian_moment_bounds(arch: Architecture, c: float, t: int = 1) -> BoundReport:
    """Bounds on ``E[||J u||^(2t)]`` over the initialization.

    ``t = 1`` gives the lower and upper mean bounds built from the min and max
    chi-squared order statistics; ``t >= 2`` gives only an upper bound. The
    variance bound is attached in both cases.
    """
    t = _check_t(t)
    const = compute_constants(arch.K)
    K, h = arch.K, arch.depth - 1
    ratio = arch.nL / arch.n0
    expo = _width_sum(arch.widths) / K + 1.0 / arch.nL
    var_upper = ratio ** 2 * c ** (2 * h) * (
        K ** (2 * h) * math.exp(4.0 * expo) - const.S ** (2 * h))
    if t == 1:
        return BoundReport("jacobian_sq_norm_mean",
                           lower=ratio * (c * const.S) ** h,
                           upper=ratio * (c * const.L) ** h,
                           variance_upper=var_upper, params=_echo(arch, c, t))
    upper = ratio ** t * (c * K) ** (t * h) * math.exp(t * t * expo)
    return BoundReport(f"jacobian_sq_norm_moment_{t}", upper=upper,
                       variance_upper=var_upper, params=_echo(arch, c, t))


def wide_deep_mean(arch: Architecture) -> float:
    """Predicted ``E[||J u||^2]`` for wide networks at ``c = 1/M``: ``nL / n0``."""
    return arch.nL / arch.n0


def activation_length_stats(arch: Architecture, c: float, x, lprime: int,
                            t: int = 1) -> BoundReport:
    """Mean and moment bounds of the normalized activation length at layer ``lprime``.

    With Gaussian biases the input is augmented by a constant 1 and later layers
    contribute a bias term; with zero biases both are dropped. For ``t = 1`` the
    exact mean is reported (lower and upper coincide with it up to the upper
    moment bound); for ``t >= 2`` the lower and upper bounds on ``E[A^t]``.
    """
    t = _check_t(t)
    h = arch.depth - 1
    if isinstance(lprime, bool) or int(lprime) != lprime or not 1 <= lprime <= h:
        raise IndexError(f"layer must lie in [1, {h}], got {lprime!r}")
    lprime = int(lprime)
    K, M = arch.K, compute_constants(arch.K).M
    n = arch.sizes
    x = np.asarray(x, dtype=np.float64).ravel()
    biased = arch.bias_mode == "gaussian"
    sq = AugmentedInput.from_input(x).sq_norm if biased else float(x @ x)

    def bias_terms(f):
        return sum(f(j) for j in range(2, lprime + 1)) if biased else 0.0

    mean = sq / n[0] * (c * M) ** lprime + bias_terms(
        lambda j: (c * M) ** (lprime - j + 1) / n[j - 1])

    def exp_tail(j, tt):
        return math.exp(sum(tt * tt / (n[l] * K) for l in range(j, lprime + 1)))

    def upper_moment(tt):
        first = 2.0 ** (tt - 1) * sq ** tt / n[0] ** tt * (c * K) ** (tt * lprime) * exp_tail(1, tt)
        if not biased:
            return first
        rest = (2.0 * (lprime - 1)) ** (tt - 1) * bias_terms(
            lambda j: (c * K) ** (tt * (lprime - j + 1)) / n[j - 1] ** tt * exp_tail(j, tt))
        return first + rest

    if biased:
        var_upper = upper_moment(2)
    else:
        var_upper = 2.0 * sq ** 2 / n[0] ** 2 * (c * K) ** (2 * lprime) * exp_tail(1, 2)

    params = {**_echo(arch, c, t), "lprime": lprime, "bias_mode": arch.bias_mode,
              "input_sq_norm": sq}
    if t == 1:
        return BoundReport("activation_length_mean", lower=mean, upper=upper_moment(1),
                           exact=mean, variance_upper=var_upper, params=params)
    lower = sq ** t / n[0] ** t * (c * M) ** (t * lprime) + bias_terms(
        lambda j: (c * M) ** (t * (lprime - j + 1)) / n[j - 1] ** t)
    return BoundReport(f"activation_length_moment_{t}", lower=lower, upper=upper_moment(t),
                       variance_upper=var_upper, params=params)


def c_grad_bound(arch: Architecture, c: float, t: int = 1) -> float:
    """Bound on the ``t``-th root of the ``t``-th moment of a pre-activation gradient norm."""
    t = _check_t(t)
    h = arch.depth - 1
    return (arch.n0 ** -0.5 * max(1.0, (c * arch.K) ** (h / 2))
            * math.exp(t / 2 * (_width_sum(arch.widths) / arch.K + 1.0)))


def _log_binom(n: float, k: float) -> float:
    if k < 0 or k > n:
        return -math.inf
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def region_count_bound(N: int, n0: int, K: int, r: int, T: float) -> float:
    """Upper bound on the expected number of ``r``-partial activation regions.

    ``N`` is the number of maxout units, ``T`` the scale constant of the
    bound. ``r = 0`` bounds the number of linear regions per unit volume.
    Binomials and factorials are combined in log space.
    """
    if not 0 <= r <= n0:
        raise ValueError(f"r must lie in [0, n0={n0}], got {r}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if N <= n0:
        # N <= n0 keeps every factor small enough for exact integers
        return float(math.comb(r * K, 2 * r) * math.comb(N, r) * K ** (N - r))
    log_val = (n0 * math.log(T * K * N) + _log_binom(n0 * K, 2 * n0)
               - r * math.log(2 * K) - math.lgamma(n0 + 1))
    return math.exp(log_val)


def curve_length_bounds(arch: Architecture, c: float, t: int = 1) -> BoundReport:
    """Upper bounds on moments of the length of a unit-length curve's image.

    ``t = 1`` reports the mean bound, ``t >= 2`` the bound on ``E[len^t]``; the
    variance bound is attached to both.
    """
    t = _check_t(t)
    const = compute_constants(arch.K)
    h = arch.depth - 1
    ratio = arch.nL / arch.n0
    var_upper = ratio * (c * const.L) ** h
    if t == 1:
        return BoundReport("curve_length_mean", upper=math.sqrt(ratio) * (c * const.L) ** (h / 2),
                           variance_upper=var_upper, params=_echo(arch, c, t))
    upper = (ratio ** (t / 2) * (c * arch.K) ** (t * h / 2)
             * math.exp(t * t / 2 * (_width_sum(arch.widths) / arch.K + 1.0 / arch.nL)))
    return BoundReport(f"curve_length_moment_{t}", upper=upper,
                       variance_upper=var_upper, params=_echo(arch, c, t))


def ntk_sizes(arch: Architecture) -> tuple[int, int]:
    """``(P, P_W)``: total units over layers ``0..L-1`` and total weights."""
    n = arch.sizes
    P = sum(n[:-1])
    P_W = sum(n[l] * n[l - 1] for l in range(1, len(n)))
    return P, P_W


def ntk_bounds(arch: Architecture, c: float, x, augment: bool = True) -> BoundReport:
    """Bounds on the mean and second moment of the on-diagonal NTK ``K_N(x, x)``.

    Requires a scalar output, zero biases and ``S <= c <= L``. The bounds use
    the squared norm of the input with a 1 appended; ``augment=False``
    substitutes the plain ``||x||^2``.
    """
    if arch.nL != 1:
        raise BoundPreconditionError(f"NTK bounds need a scalar output, got nL = {arch.nL}")
    if arch.bias_mode != "zero":
        raise BoundPreconditionError("NTK bounds assume zero, untrained biases")
    const = compute_constants(arch.K)
    if not const.S <= c <= const.L:
        raise BoundPreconditionError(
            f"NTK bounds assume S <= c <= L, i.e. {const.S:.6g} <= c <= {const.L:.6g}; got c = {c}")
    x = np.asarray(x, dtype=np.float64).ravel()
    sq = AugmentedInput.from_input(x).sq_norm if augment else float(x @ x)
    L, n0, K = arch.depth, arch.n0, arch.K
    P, P_W = ntk_sizes(arch)
    lower = sq * (c * const.S) ** (L - 2) / n0 * P
    upper = sq * (c * const.L) ** (L - 2) * const.M ** (L - 1) / n0 * P
    second = (2.0 * P * P_W * (c * K) ** (2 * (L - 2)) * sq ** 2 / n0 ** 2
              * math.exp(4.0 * _width_sum(arch.widths) / K + 4.0))
    params = {**_echo(arch, c), "P": P, "P_W": P_W, "input_sq_norm": sq, "augment": augment}
    return BoundReport("ntk_diag_mean", lower=lower, upper=upper,
                       variance_upper=second, params=params)


@dataclass(frozen=True)
class ArchitectureReport:
    width_sum: float
    width_criterion_pass: bool
    cK: float
    c_is_recommended: bool

    def to_dict(self) -> dict:
        return {"width_sum": self.width_sum, "width_criterion_pass": self.width_criterion_pass,
                "cK": self.cK, "c_is_recommended": self.c_is_recommended}


def architecture_check(arch: Architecture, c: float) -> ArchitectureReport:
    """Check the width criterion ``sum_l 1/(n_l K) <= 1`` and the choice of ``c``."""
    # widths are integers, so the criterion itself is decided exactly
    exact = sum(Fraction(1, n * arch.K) for n in arch.widths)
    rec = compute_constants(arch.K).recommended_c
    return ArchitectureReport(float(exact), exact <= 1, c * arch.K, abs(c - rec) <= 1e-6)
