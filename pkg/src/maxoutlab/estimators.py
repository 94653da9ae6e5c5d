"""Monte-Carlo and enumeration checks of the distributional results.

Every estimator draws sample ``i`` from its own generator, derived from the
master seed and the sample index, so results do not depend on how samples are
spread over worker threads. Per-sample values are collected in index order
and reduced in that order.

The worker count is read from the ``MAXOUTLAB_WORKERS`` environment variable
(default 1).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import network as nc
from .network import Architecture, InitScheme, ParamSet
from .order_stats import sample_order_stat

WORKERS_ENV = "MAXOUTLAB_WORKERS"

# substream labels; each estimator draws from its own family of streams
_STREAM_JACOBIAN = 1
_STREAM_ORDER = 2
_STREAM_EQDIST_A = 3
_STREAM_EQDIST_B = 4
_STREAM_EQDIST_FRESH = 5
_STREAM_COSINE = 6
_STREAM_ACTLEN = 7
_STREAM_CURVE = 8
_STREAM_NTK = 9


def substream(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a given stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, index)))


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def map_samples(fn: Callable[[np.random.Generator, int], object], n: int, seed: int,
                stream: int, workers: Optional[int] = None) -> list:
    """Evaluate ``fn(rng_i, i)`` for ``i < n`` and return the results in index order."""
    workers = n_workers() if workers is None else workers

    def run(lo: int, hi: int) -> list:
        return [fn(substream(seed, stream, i), i) for i in range(lo, hi)]

    if workers == 1 or n < 2:
        return run(0, n)
    bounds = np.linspace(0, n, min(n, 4 * workers) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    return [v for chunk in chunks for v in chunk]


@dataclass
class MomentEstimate:
    mean: float
    variance: float
    higher_moments: dict[int, float]
    stderr_mean: float
    n_samples: int
    master_seed: int
    samples: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_samples(cls, values, t_max: int, seed: int) -> "MomentEstimate":
        v = np.asarray(values, dtype=np.float64)
        n = v.size
        if n < 2:
            raise ValueError("need at least two samples")
        mean = float(v.mean())
        var = float(v.var(ddof=1))
        moments = {t: float(np.mean(v ** t)) for t in range(1, t_max + 1)}
        return cls(mean, var, moments, math.sqrt(var / n), n, int(seed), v)

    def to_dict(self) -> dict:
        out = {"mean": self.mean, "variance": self.variance, "stderr_mean": self.stderr_mean,
               "n_samples": self.n_samples, "master_seed": self.master_seed}
        out.update({f"moment_{t}": m for t, m in self.higher_moments.items()})
        return out


def _seed(scheme: InitScheme, seed: Optional[int]) -> int:
    return scheme.seed if seed is None else int(seed)


def _unit(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise ValueError(f"direction must have unit norm, got |u| = {np.linalg.norm(u)!r}")
    return u


# Jacobian -------------------------------------------------------------------

def jacobian_samples(arch: Architecture, scheme: InitScheme, x, u, n_samples: int,
                     seed: int, stream: int = _STREAM_JACOBIAN) -> np.ndarray:
    u = _unit(u)

    def one(rng, _i):
        return nc.directional_derivative_sq(nc.init_params(arch, scheme, rng), x, u)

    return np.array(map_samples(one, n_samples, seed, stream))


def mc_jacobian_moments(arch: Architecture, scheme: InitScheme, x, u, t_max: int = 2,
                        n_samples: int = 1000, seed: Optional[int] = None) -> MomentEstimate:
    """Moments of ``||J(x) u||^2`` over random initializations."""
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    seed = _seed(scheme, seed)
    vals = jacobian_samples(arch, scheme, x, u, n_samples, seed)
    return MomentEstimate.from_samples(vals, t_max, seed)


# stochastic order -----------------------------------------------------------

def sample_order_bound(arch: Architecture, c: float, side: str, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Draws of the lower (``side='lower'``) or upper bounding variable.

    Each draw is ``chi2_{nL} / n0 * prod_l (c / n_l) sum_i Z_{l,i}`` with
    ``Z`` the min (lower) or max (upper) of K chi-squared(1) variables.
    """
    kind = {"lower": "min_chisq1", "upper": "max_chisq1"}.get(side)
    if kind is None:
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    out = rng.chisquare(arch.nL, size=n_samples) / arch.n0
    for n_l in arch.widths:
        z = sample_order_stat(kind, arch.K, rng, size=(n_samples, n_l))
        out *= c / n_l * z.sum(axis=1)
    return out


@dataclass
class OrderCheck:
    passed: bool
    max_violation: float
    epsilon: float


def dkw_epsilon(n: int, alpha: float) -> float:
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n))


def dkw_stochastic_order(smaller, larger, alpha: float = 0.01,
                         grid: Optional[np.ndarray] = None) -> OrderCheck:
    """Test ``smaller <=_st larger``: ``F_larger(z) <= F_smaller(z)`` up to two DKW bands.

    The grid defaults to 100 quantiles of the pooled sample.
    """
    a = np.sort(np.asarray(smaller, dtype=np.float64))
    b = np.sort(np.asarray(larger, dtype=np.float64))
    if grid is None:
        grid = np.quantile(np.concatenate([a, b]), (np.arange(100) + 0.5) / 100)
    F_a = np.searchsorted(a, grid, side="right") / a.size
    F_b = np.searchsorted(b, grid, side="right") / b.size
    eps = dkw_epsilon(a.size, alpha) + dkw_epsilon(b.size, alpha)
    excess = float(np.max(F_b - F_a))
    return OrderCheck(excess <= eps, excess, eps)


@dataclass
class OrderTestReport:
    passed: bool
    lower_check: OrderCheck
    upper_check: OrderCheck
    n_samples: int
    alpha: float
    master_seed: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "n_samples": self.n_samples, "alpha": self.alpha,
                "master_seed": self.master_seed, "epsilon": self.lower_check.epsilon,
                "lower_max_violation": self.lower_check.max_violation,
                "upper_max_violation": self.upper_check.max_violation}


def stochastic_order_test(arch: Architecture, scheme: InitScheme, x, u,
                          n_samples: int = 10_000, alpha: float = 0.01,
                          seed: Optional[int] = None) -> OrderTestReport:
    """Check ``lower <=_st ||J u||^2 <=_st upper`` with DKW bands on a quantile grid."""
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 10^4, got {n_samples}")
    seed = _seed(scheme, seed)
    emp = jacobian_samples(arch, scheme, x, u, n_samples, seed)
    rng = substream(seed, _STREAM_ORDER, 0)
    lo = sample_order_bound(arch, scheme.c, "lower", n_samples, rng)
    hi = sample_order_bound(arch, scheme.c, "upper", n_samples, rng)
    grid = np.quantile(emp, (np.arange(100) + 0.5) / 100)
    lower_check = dkw_stochastic_order(lo, emp, alpha, grid)
    upper_check = dkw_stochastic_order(emp, hi, alpha, grid)
    return OrderTestReport(lower_check.passed and upper_check.passed, lower_check,
                           upper_check, n_samples, alpha, seed)


# equality in distribution ---------------------------------------------------

def _augment(v: np.ndarray, value: float, biased: bool) -> np.ndarray:
    return np.append(v, value) if biased else v


def cosine_sequence(params: ParamSet, x, u) -> np.ndarray:
    """Signed cosines between the (augmented) activation and direction, per hidden layer.

    Entry ``l`` compares the input of hidden layer ``l + 1`` with the
    direction propagated to that layer. With Gaussian biases both vectors get
    an extra coordinate: 1 for the activation, 0 for the direction. A
    direction that has collapsed to zero yields cosine 0.
    """
    biased = params.arch.bias_mode == "gaussian"
    trace = nc.forward(params, x)
    d = np.asarray(u, dtype=np.float64)
    cos = np.zeros(len(params.weights))
    for l, k in enumerate(trace.kstar):
        xa = _augment(trace.inputs[l], 1.0, biased)
        dn = np.linalg.norm(d)
        xn = np.linalg.norm(xa)
        if dn > 0 and xn > 0:
            cos[l] = float(xa @ _augment(d, 0.0, biased)) / (xn * dn)
        d = nc.selected_rows(params, l, k) @ d
    return np.clip(cos, -1.0, 1.0)


def equality_rhs_sample(arch: Architecture, c: float, cosines: np.ndarray,
                        rng: np.random.Generator) -> float:
    """One draw of ``chi2_{nL}/n0 * prod_l (c/n_l) sum_i (v_i sin + Xi_i cos)^2``."""
    out = rng.chisquare(arch.nL) / arch.n0
    for n_l, cs in zip(arch.widths, cosines):
        v = rng.standard_normal(n_l)
        xi = sample_order_stat("max_gauss", arch.K, rng, size=n_l)
        sn = math.sqrt(max(0.0, 1.0 - cs * cs))
        out *= c / n_l * float(np.sum((v * sn + xi * cs) ** 2))
    return out


@dataclass
class EqDistReport:
    passed: bool
    ks_statistic: float
    p_value: float
    alpha: float
    n_samples: int
    master_seed: int
    sample_a: np.ndarray = field(repr=False)
    sample_b: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "ks_statistic": self.ks_statistic,
                "p_value": self.p_value, "alpha": self.alpha, "n_samples": self.n_samples,
                "master_seed": self.master_seed, "mean_a": float(self.sample_a.mean()),
                "mean_b": float(self.sample_b.mean())}


def eq_in_distribution_check(arch: Architecture, scheme: InitScheme, x, u,
                             n_samples: int = 10_000, seed: Optional[int] = None,
                             alpha: float = 0.01) -> EqDistReport:
    """Two-sample KS test of ``||J u||^2`` against its cosine representation.

    Sample A comes from real networks. Each draw of sample B takes the cosine
    sequence of an independently initialized network and combines it with
    fresh chi-squared, Gaussian and max-Gaussian variables.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        raise ValueError("input must be nonzero")
    u = _unit(u)
    seed = _seed(scheme, seed)
    a = jacobian_samples(arch, scheme, x, u, n_samples, seed, _STREAM_EQDIST_A)

    def one_b(rng, i):
        cos = cosine_sequence(nc.init_params(arch, scheme, rng), x, u)
        return equality_rhs_sample(arch, scheme.c, cos, substream(seed, _STREAM_EQDIST_FRESH, i))

    b = np.array(map_samples(one_b, n_samples, seed, _STREAM_EQDIST_B))
    res = stats.ks_2samp(a, b)
    return EqDistReport(bool(res.pvalue > alpha), float(res.statistic), float(res.pvalue),
                        alpha, n_samples, seed, a, b)


# cosine dynamics ------------------------------------------------------------

@dataclass
class CosineTrajectory:
    mean_abs_cos: np.ndarray
    stderr: np.ndarray
    n_inits: int
    master_seed: int

    def records(self) -> list[dict]:
        return [{"layer": l, "mean_abs_cos": float(m), "stderr": float(s)}
                for l, (m, s) in enumerate(zip(self.mean_abs_cos, self.stderr))]


def cosine_trajectory(arch: Architecture, scheme: InitScheme, x, u, n_inits: int = 200,
                      seed: Optional[int] = None) -> CosineTrajectory:
    """Average ``|cos|`` between activation and propagated direction per layer."""
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        raise ValueError("input must be nonzero")
    u = _unit(u)
    seed = _seed(scheme, seed)

    def one(rng, _i):
        return np.abs(cosine_sequence(nc.init_params(arch, scheme, rng), x, u))

    vals = np.array(map_samples(one, n_inits, seed, _STREAM_COSINE))
    se = vals.std(axis=0, ddof=1) / math.sqrt(n_inits) if n_inits > 1 else np.zeros(vals.shape[1])
    return CosineTrajectory(vals.mean(axis=0), se, n_inits, seed)


# activation length ----------------------------------------------------------

def mc_activation_length(arch: Architecture, scheme: InitScheme, x, lprime: int,
                         t_max: int = 2, n_samples: int = 10_000,
                         seed: Optional[int] = None) -> MomentEstimate:
    """Moments of ``||x^(l')||^2 / n_l'`` over random initializations."""
    if not 0 <= lprime < arch.depth:
        raise IndexError(f"layer must lie in [0, {arch.depth - 1}], got {lprime}")
    seed = _seed(scheme, seed)

    def one(rng, _i):
        return nc.activation_length(nc.init_params(arch, scheme, rng), x, lprime)

    vals = map_samples(one, n_samples, seed, _STREAM_ACTLEN)
    return MomentEstimate.from_samples(vals, t_max, seed)


def mc_activation_length_all(arch: Architecture, scheme: InitScheme, x, t_max: int = 2,
                             n_samples: int = 10_000,
                             seed: Optional[int] = None) -> list[MomentEstimate]:
    """Activation-length moments for layers ``1..L-1`` from one set of draws."""
    seed = _seed(scheme, seed)

    def one(rng, _i):
        trace = nc.forward(nc.init_params(arch, scheme, rng), x)
        return [float(h @ h) / h.size for h in trace.inputs[1:]]

    vals = np.array(map_samples(one, n_samples, seed, _STREAM_ACTLEN))
    return [MomentEstimate.from_samples(vals[:, j], t_max, seed) for j in range(vals.shape[1])]


# curve length ---------------------------------------------------------------

def straight_segment(a, b, n_points: int = 1000) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a + np.linspace(0.0, 1.0, n_points)[:, None] * (b - a)


def _unit_length_curve(curve) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = np.asarray(curve, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("curve must be an (m, n0) array with m >= 2")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seg == 0):
        raise ValueError("curve has repeated consecutive points")
    total = seg.sum()
    pts = pts[0] + (pts - pts[0]) / total
    # arc-length parameter on [0, 1] and the tangent in that parameter
    tau = np.concatenate([[0.0], np.cumsum(seg) / total])
    tangent = np.gradient(pts, tau, axis=0)
    return pts, tau, tangent


def curve_image_length(params: ParamSet, curve) -> float:
    """Trapezoid estimate of the image length of a curve rescaled to unit length."""
    pts, tau, tangent = _unit_length_curve(curve)
    speed = np.linalg.norm(nc.jvp(params, pts, tangent), axis=1)
    return float(np.trapezoid(speed, tau))


def mc_curve_length(arch: Architecture, scheme: InitScheme, curve, n_inits: int = 1000,
                    seed: Optional[int] = None, t_max: int = 2) -> MomentEstimate:
    """Moments of the image length of a unit-length curve over initializations."""
    _unit_length_curve(curve)
    seed = _seed(scheme, seed)

    def one(rng, _i):
        return curve_image_length(nc.init_params(arch, scheme, rng), curve)

    vals = map_samples(one, n_inits, seed, _STREAM_CURVE)
    return MomentEstimate.from_samples(vals, t_max, seed)


# linear regions along a segment ---------------------------------------------

@dataclass
class RegionCount1D:
    a: np.ndarray
    b: np.ndarray
    breakpoints: list[float]

    @property
    def region_count(self) -> int:
        return len(self.breakpoints) + 1


def _patterns(params: ParamSet, a: np.ndarray, b: np.ndarray, ts: np.ndarray) -> np.ndarray:
    pts = a + ts[:, None] * (b - a)
    return nc.forward(params, pts).pattern()


def count_regions_1d(params: ParamSet, a, b, resolution: int = 10_000,
                     refine_tol: float = 1e-10) -> RegionCount1D:
    """Locate activation-pattern changes along the segment from ``a`` to ``b``.

    The segment is scanned at ``resolution`` evenly spaced parameters. Each
    adjacent pair with different patterns is bisected until the bracketing
    interval is at most ``refine_tol`` wide; every such interval contributes
    one breakpoint at its midpoint.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints must differ")
    ts = np.linspace(0.0, 1.0, resolution)
    pats = _patterns(params, a, b, ts)
    breaks: list[float] = []

    def pattern_at(t: float) -> np.ndarray:
        return _patterns(params, a, b, np.array([t]))[0]

    def refine(t0, p0, t1, p1):
        # iterative bisection; a stack keeps breakpoints in increasing order
        stack = [(t0, p0, t1, p1)]
        while stack:
            t0, p0, t1, p1 = stack.pop()
            if t1 - t0 <= refine_tol:
                breaks.append(0.5 * (t0 + t1))
                continue
            tm = 0.5 * (t0 + t1)
            if tm <= t0 or tm >= t1:
                breaks.append(tm)
                continue
            pm = pattern_at(tm)
            if not np.array_equal(pm, p1):
                stack.append((tm, pm, t1, p1))
            if not np.array_equal(pm, p0):
                stack.append((t0, p0, tm, pm))

    changed = np.flatnonzero(np.any(pats[1:] != pats[:-1], axis=1))
    for j in changed:
        refine(ts[j], pats[j], ts[j + 1], pats[j + 1])
    return RegionCount1D(a, b, breaks)


def dense_grid_region_count(params: ParamSet, a, b, resolution: int,
                            chunk: int = 100_000) -> int:
    """Count of distinct consecutive patterns on a uniform grid of the segment."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, resolution)
    changes, prev = 0, None
    for lo in range(0, resolution, chunk):
        pats = _patterns(params, a, b, ts[lo:lo + chunk])
        if prev is not None:
            pats = np.vstack([prev, pats])
        changes += int(np.count_nonzero(np.any(pats[1:] != pats[:-1], axis=1)))
        prev = pats[-1:]
    return changes + 1


# NTK ------------------------------------------------------------------------

def ntk_diag(params: ParamSet, x) -> float:
    """On-diagonal NTK over weights only: sum of squared output derivatives."""
    if params.arch.nL != 1:
        raise ValueError(f"NTK needs a scalar output, got nL = {params.arch.nL}")
    g = nc.param_gradients(params, x, np.ones(1))
    return float(sum(np.sum(W * W) for W in g.weights) + np.sum(g.w_out * g.w_out))


def mc_ntk_diag(arch: Architecture, scheme: InitScheme, x, n_samples: int = 10_000,
                seed: Optional[int] = None, t_max: int = 2) -> MomentEstimate:
    """Moments of the on-diagonal NTK over zero-bias initializations."""
    if arch.nL != 1:
        raise ValueError(f"NTK needs a scalar output, got nL = {arch.nL}")
    if (scheme.bias_mode or arch.bias_mode) != "zero":
        raise ValueError("NTK estimation assumes zero biases")
    seed = _seed(scheme, seed)

    def one(rng, _i):
        return ntk_diag(nc.init_params(arch, scheme, rng), x)

    vals = map_samples(one, n_samples, seed, _STREAM_NTK)
    return MomentEstimate.from_samples(vals, t_max, seed)
