"""Acceptance criteria 1-12 at their stated tolerances and time budgets.

Each test carries a ``criterion`` mark; ``conftest.py`` prints one PASS/FAIL
line per criterion at the end of the run. Run this file directly for just
the acceptance suite.
"""
import time

import numpy as np
import pytest

from maxoutlab import estimators as est
from maxoutlab import network as nc
from maxoutlab import theory as th
from maxoutlab import training as tr
from maxoutlab.network import Architecture, InitScheme
from maxoutlab.order_stats import compute_constants, recommended_c

C5 = 0.55555

REF_SLM = {
    2: (0.36338, 1.63662, 1.0),
    3: (0.1928, 2.10266, 1.27566),
    4: (0.1207, 2.47021, 1.55133),
    5: (0.08308, 2.77375, 1.80002),
    6: (0.06083, 3.03236, 2.02174),
    7: (0.04655, 3.25771, 2.2203),
    8: (0.0368, 3.45743, 2.39954),
    9: (0.02984, 3.63681, 2.56262),
    10: (0.0247, 3.79962, 2.7121),
}
REF_C = [1, 0.78391, 0.64461, 0.55555, 0.49462, 0.45039, 0.41675, 0.39023, 0.36872]


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def min_gap(params, x):
    gaps = [np.inf]
    for z in nc.forward(params, x).pre:
        s = np.sort(z, axis=-1)
        gaps.append(np.min(s[..., -1] - s[..., -2]) if z.shape[-1] > 1 else np.min(np.abs(z)))
    return float(min(gaps))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.mark.criterion(1, "order-statistic constants")
def test_constants(record_property):
    with Timer() as t:
        got = {K: compute_constants.__wrapped__(K) for K in REF_SLM}
        err = max(abs(v - ref) for K, row in REF_SLM.items()
                  for v, ref in zip((got[K].S, got[K].L, got[K].M), row))
        c_err = max(abs(recommended_c(K) - ref) for K, ref in zip(range(2, 11), REF_C))
    record_property("detail", f"max |SLM err| {err:.2e}, max |c err| {c_err:.2e}, {t.elapsed:.1f}s")
    assert err <= 1e-4 and c_err <= 1e-5 and t.elapsed < 10


@pytest.mark.criterion(2, "layerwise product identity")
def test_product_identity(record_property):
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    with Timer() as t:
        while n < 100:
            depth, width = int(rng.integers(1, 7)), int(rng.integers(1, 21))
            n0, nL, K = int(rng.integers(1, 21)), int(rng.integers(1, 21)), int(rng.integers(2, 8))
            arch = Architecture(n0, (width,) * (depth - 1), nL, K,
                                bias_mode=["gaussian", "zero"][n % 2])
            p = nc.init_params(arch, InitScheme(float(rng.uniform(0.3, 2.0)), seed=n))
            x, u = rng.standard_normal(n0), unit(rng.standard_normal(n0))
            full = float(np.sum((nc.input_jacobian(p, x).J @ u) ** 2))
            if full < 1e-250:
                continue
            worst = max(worst, abs(full - nc.directional_derivative_sq(p, x, u)) / full)
            n += 1
    record_property("detail", f"max rel err {worst:.2e} over {n} nets, {t.elapsed:.1f}s")
    assert worst <= 1e-10 and t.elapsed < 30


@pytest.mark.criterion(3, "gradient finite-difference oracles")
def test_gradient_oracles(record_property):
    rng = np.random.default_rng(3)
    h = 1e-6
    worst_in = worst_dir = worst_coord = 0.0
    n = 0
    with Timer() as t:
        while n < 100:
            n0, nL = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            widths = tuple(int(w) for w in rng.integers(1, 9, size=rng.integers(0, 4)))
            act = "relu" if n % 4 == 3 else "maxout"
            arch = Architecture(n0, widths, nL, int(rng.integers(2, 6)), act)
            p = nc.init_params(arch, InitScheme(float(rng.uniform(0.5, 2.0)), seed=1000 + n))
            x = rng.standard_normal(n0)
            if min_gap(p, x) < 1e-3:
                continue
            n += 1
            # input gradient: full Jacobian against central differences
            J = nc.input_jacobian(p, x).J
            fd = np.stack([(nc.network_output(p, x + h * e) - nc.network_output(p, x - h * e))
                           / (2 * h) for e in np.eye(n0)], axis=1)
            worst_in = max(worst_in, np.linalg.norm(J - fd) / max(np.linalg.norm(fd), 1e-300))
            # parameter gradient of a random linear read-out of the output
            up = rng.standard_normal(nL)
            g = np.concatenate([a.ravel() for a in nc.param_gradients(p, x, up).arrays()])
            arrays = p.arrays()
            theta = np.concatenate([a.ravel() for a in arrays])

            def f(vec):
                q = p.copy()
                off = 0
                for a in q.arrays():
                    a.reshape(-1)[:] = vec[off:off + a.size]
                    off += a.size
                return float(up @ nc.network_output(q, x))

            d = unit(rng.standard_normal(theta.size))
            fd_dir = (f(theta + h * d) - f(theta - h * d)) / (2 * h)
            worst_dir = max(worst_dir, abs(fd_dir - g @ d) / max(abs(fd_dir), 1e-300))
            idx = rng.choice(theta.size, size=min(10, theta.size), replace=False)
            fd_c = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h)
                             for e in np.eye(theta.size)[idx]])
            worst_coord = max(worst_coord, np.linalg.norm(fd_c - g[idx])
                              / max(np.linalg.norm(fd_c), 1e-300))
    record_property("detail", f"rel err input {worst_in:.1e}, param dir {worst_dir:.1e}, "
                              f"param coords {worst_coord:.1e}, {t.elapsed:.1f}s")
    assert max(worst_in, worst_dir, worst_coord) <= 1e-5 and t.elapsed < 60


@pytest.mark.criterion(4, "stochastic order with DKW bands")
def test_stochastic_order(record_property):
    arch = Architecture(20, (20, 20, 20), 20, K=5)
    rng = np.random.default_rng(4)
    with Timer() as t:
        r = est.stochastic_order_test(arch, InitScheme(C5, seed=4), rng.standard_normal(20),
                                      unit(rng.standard_normal(20)), 10_000, 0.01)
    record_property("detail", f"violations lower {r.lower_check.max_violation:.4f}, "
                              f"upper {r.upper_check.max_violation:.4f}, "
                              f"band {r.lower_check.epsilon:.4f}, {t.elapsed:.1f}s")
    assert r.passed and t.elapsed < 120


@pytest.mark.slow
@pytest.mark.criterion(5, "mean stability of the squared directional derivative")
def test_mean_stability(record_property):
    # zero biases with u along x: the direction cosine stays 1 through every layer
    arch = Architecture(50, (50,) * 9, 50, K=5, bias_mode="zero")
    x = np.random.default_rng(5).standard_normal(50)
    u = unit(x)
    with Timer() as t:
        m = est.mc_jacobian_moments(arch, InitScheme(C5, seed=5), x, u, 2, 10_000)
        b = th.jacobian_moment_bounds(arch, C5)
        small = est.mc_jacobian_moments(arch, InitScheme(0.1, seed=6), x, u, 1, 10_000)
    ratio = arch.nL / arch.n0
    generic = est.mc_jacobian_moments(arch, InitScheme(C5, seed=7), x,
                                      unit(np.random.default_rng(8).standard_normal(50)), 1, 2_000)
    print(f"\n[info] generic direction (not aligned with x), 2000 inits: mean {generic.mean:.4f} "
          f"+- {generic.stderr_mean:.4f}")
    record_property("detail", f"mean {m.mean:.4f} +- {m.stderr_mean:.4f} in "
                              f"[{b.lower:.2e}, {b.upper:.2f}]; c=0.1 mean {small.mean:.2e}; "
                              f"{t.elapsed:.1f}s")
    assert b.lower <= m.mean <= b.upper
    assert 0.5 * ratio <= m.mean <= 2.0 * ratio
    assert small.mean <= 1e-3 * ratio
    assert t.elapsed < 300


@pytest.mark.criterion(6, "equality in distribution (two-sample KS)")
def test_equality_in_distribution(record_property):
    arch = Architecture(2, (2,), 2, K=5)
    with Timer() as t:
        r = est.eq_in_distribution_check(arch, InitScheme(C5, seed=6), [0.7, -1.2], [0.6, 0.8],
                                         10_000, alpha=0.01)
    record_property("detail", f"KS {r.ks_statistic:.4f}, p {r.p_value:.3f}, {t.elapsed:.1f}s")
    assert r.passed and t.elapsed < 180


@pytest.mark.slow
@pytest.mark.criterion(7, "activation length mean formula")
def test_activation_length(record_property):
    x = np.random.default_rng(7).standard_normal(10)
    zs = []
    with Timer() as t:
        for mode in ("gaussian", "zero"):
            arch = Architecture(10, (10,) * 4, 10, K=5, bias_mode=mode)
            assert arch.depth == 5
            ests = est.mc_activation_length_all(arch, InitScheme(C5, seed=7), x, 1, 100_000)
            for lp, m in enumerate(ests, 1):
                exact = th.activation_length_stats(arch, C5, x, lp).exact
                zs.append((m.mean - exact) / m.stderr_mean)
    worst = float(np.max(np.abs(zs)))
    record_property("detail", f"max |z| {worst:.2f} over {len(zs)} layer/mode pairs, "
                              f"{t.elapsed:.1f}s")
    assert worst <= 3 and t.elapsed < 180


@pytest.mark.slow
@pytest.mark.criterion(8, "cosine dynamics")
def test_cosine_dynamics(record_property):
    arch = Architecture(100, (100,) * 99, 100, K=5)
    rng = np.random.default_rng(8)
    x, u = rng.standard_normal(100), unit(rng.standard_normal(100))
    with Timer() as t:
        good = est.cosine_trajectory(arch, InitScheme(C5, seed=8), x, u, 200)
        low = est.cosine_trajectory(arch, InitScheme(0.3, seed=8), x, u, 200)
    # entry l is the cosine of the activation after l hidden layers
    at30 = float(good.mean_abs_cos[30])
    gap = float(good.mean_abs_cos[-1] - low.mean_abs_cos[-1])
    record_property("detail", f"c={C5} layer 30 {at30:.3f}, final {good.mean_abs_cos[-1]:.3f}; "
                              f"c=0.3 final {low.mean_abs_cos[-1]:.3f}; {t.elapsed:.1f}s")
    assert at30 >= 0.9 and gap >= 0.05 and t.elapsed < 300


@pytest.mark.criterion(9, "linear region counting")
def test_regions(record_property):
    rng = np.random.default_rng(9)
    mismatches, over, counts = 0, 0, []
    with Timer() as t:
        for i in range(50):
            K = int(rng.integers(2, 6))
            widths = (int(rng.integers(2, 9)),) if i % 2 == 0 else (6, 6)
            arch = Architecture(2, widths, 1, K=K)
            p = nc.init_params(arch, InitScheme(1.0, seed=900 + i))
            a, b = 2 * rng.standard_normal(2), 2 * rng.standard_normal(2)
            r = est.count_regions_1d(p, a, b, 1000)
            oracle = est.dense_grid_region_count(p, a, b, 100_000)
            mismatches += r.region_count != oracle
            if len(widths) == 1:
                over += r.region_count > widths[0] * (K - 1) + 1
            counts.append(r.region_count)
    record_property("detail", f"{mismatches} oracle mismatches, {over} bound violations, "
                              f"counts {min(counts)}..{max(counts)}, {t.elapsed:.1f}s")
    assert mismatches == 0 and over == 0 and t.elapsed < 120


@pytest.mark.criterion(10, "curve length distortion")
def test_curve_length(record_property):
    arch = Architecture(2, (10, 10, 10), 2, K=5)
    a = np.array([0.3, -0.5])
    curve = est.straight_segment(a, a + unit([1.0, 2.0]), 1000)
    with Timer() as t:
        m = est.mc_curve_length(arch, InitScheme(C5, seed=10), curve, 1000)
    bound = th.curve_length_bounds(arch, C5).upper
    record_property("detail", f"mean {m.mean:.4f} +- {m.stderr_mean:.4f}, bound {bound:.4f}, "
                              f"{t.elapsed:.1f}s")
    assert bound == pytest.approx(1.9129, abs=1e-4)
    assert m.mean <= 1.9129 + 3 * m.stderr_mean and t.elapsed < 180


@pytest.mark.criterion(11, "on-diagonal NTK bounds")
def test_ntk(record_property):
    arch = Architecture(2, (3,), 1, K=5, bias_mode="zero")
    x = [1.0, 0.0]
    with Timer() as t:
        m = est.mc_ntk_diag(arch, InitScheme(C5, seed=11), x, 10_000)
    b = th.ntk_bounds(arch, C5, x)
    exact = 3 * C5 / 2 * compute_constants(5).M + 1.0
    print(f"\n[info] exact E[K(x,x)] for this net is {exact:.5f}")
    record_property("detail", f"mean {m.mean:.4f} +- {m.stderr_mean:.4f} vs "
                              f"[{b.lower:.4f}, {b.upper:.4f}]; second moment "
                              f"{m.higher_moments[2]:.3f} <= {b.variance_upper:.3f}; "
                              f"{t.elapsed:.1f}s")
    assert b.lower == pytest.approx(5.0) and b.upper == pytest.approx(9.0001, abs=1e-3)
    assert m.higher_moments[2] <= b.variance_upper
    assert 5.0 - 3 * m.stderr_mean <= m.mean <= 9.0001 + 3 * m.stderr_mean
    assert t.elapsed < 180


@pytest.mark.slow
@pytest.mark.criterion(12, "Iris training comparison")
def test_iris_training(record_property):
    widths = (64,) * 5 + (32,) * 5 + (16,) * 5 + (8,) * 5
    arch = Architecture(4, widths, 3, K=5, bias_mode="zero")
    assert arch.depth == 21
    data = tr.load_dataset("iris", seed=0)
    specs = [tr.SchemeSpec("maxout_init", recommended_c(5)),
             tr.SchemeSpec("small_c", 0.1),
             tr.SchemeSpec("relu_he", 2.0, activation="relu", learning_rate=0.005)]
    with Timer() as t:
        rows = tr.compare_inits(data, arch, specs, tr.OptimizerConfig("sgd_nesterov", 0.9),
                                n_runs=4, seed=0, learning_rate=0.01,
                                lr_halving_period_epochs=100, epochs=500, batch_size=32)
    acc = {r["scheme"]: r for r in rows}
    record_property("detail", ", ".join(f"{k} {v['mean_acc']:.3f}+-{v['std_acc']:.3f}"
                                        for k, v in acc.items()) + f", {t.elapsed:.0f}s")
    assert acc["maxout_init"]["mean_acc"] >= 0.85
    assert acc["small_c"]["mean_acc"] <= 0.40
    assert acc["relu_he"]["mean_acc"] >= 0.85
    assert t.elapsed < 900


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
