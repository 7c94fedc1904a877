"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest -v -s tests/test_acceptance.py`.  The rate-trend experiment
(criteria 11-12) drives the full training harness and dominates the runtime.
"""

import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fmlab import theory
from fmlab.cfm import EmpiricalOracle
from fmlab.config import ExperimentConfig
from fmlab.harness import fit_slope, run, w_p_to_quantile
from fmlab.ode import (
    ClosedFormFlow,
    FlowConfig,
    flow_difference_residual,
    integrate,
    push_samples,
    w2_bound_rhs_detail,
)
from fmlab.schedules import affine, variance_preserving
from fmlab.seeding import substream
from fmlab.targets import make_target
from fmlab.velocity_net import VelocityNet
from fmlab.wasserstein import EmpiricalMeasure, conv_gap_bound, w_p_1d, w_p_exact
from fmlab.bspline import SplineBasisIndex, eval_tensor, fit as spline_fit, l2_error, rate_sweep


def _ok(num, msg):
    print(f"[criterion {num:>2}] PASS — {msg}")


# -- 1 ----------------------------------------------------------------------


def test_criterion_01_exponent_identities():
    rng = np.random.default_rng(42)
    for _ in range(20):
        s = float(rng.uniform(0.2, 6.0))
        d = int(rng.integers(2, 10))
        up = theory.upper_rate_exponent(theory.RateContext(s=s, d=d, kappa=0.5, delta=0.0, n=100))
        low = theory.minimax_lower_exponent(s, d)
        assert up == low  # exact float equality
    assert theory.upper_rate_exponent(
        theory.RateContext(s=1, d=2, kappa=0.5, delta=0.0, n=100)
    ) == 0.5
    _ok(1, "upper exponent at kappa=1/2 equals the minimax lower exponent, 20 random (s, d)")


# -- 2 ----------------------------------------------------------------------


def test_criterion_02_gradient_correctness():
    net = VelocityNet(1, (16, 16, 16), affine(), n_train=64, seed=3)
    rng = substream(9, 0)
    x = rng.uniform(-1, 1, (8, 1))
    t = rng.uniform(0.2, 1.0, 8)
    v = rng.standard_normal((8, 1))
    _, grads = net.grad(x, t, v)
    flat = np.concatenate([g.ravel() for g in grads])
    params = net.parameters()
    h = 1e-6
    checked = 0
    for pi in rng.choice(flat.size, 80, replace=False):
        off = 0
        for p in params:
            if pi < off + p.size:
                local = pi - off
                orig = p.ravel()[local]
                p.ravel()[local] = orig + h
                lp, _ = net.grad(x, t, v)
                p.ravel()[local] = orig - h
                lm, _ = net.grad(x, t, v)
                p.ravel()[local] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(fd - flat[pi]) <= 1e-5 * max(abs(flat[pi]), 1e-4)
                checked += 1
                break
            off += p.size
    assert checked >= 64
    _ok(2, f"reverse-mode gradient matches central differences on {checked} parameters")


# -- 3 ----------------------------------------------------------------------


def test_criterion_03_closed_form_flow_and_order():
    oracle = EmpiricalOracle(np.zeros((1, 1)), affine())
    cfg = FlowConfig(method="rk4", steps=200, spacing="log", t_end=1e-3)
    for x1 in (0.7, -1.2):
        out = integrate(oracle.velocity, np.array([[x1]]), cfg)
        assert abs(out[0, 0] - x1 * 1e-3) <= 1e-8 * abs(x1 * 1e-3)
    # RK4 integrates the x/t oracle exactly (linear-in-t solutions), so the
    # steps^-4 ratio is measured on the exponential oracle -x instead
    errs = []
    for steps in (100, 200):
        out = integrate(
            lambda x, t: -x, np.array([[1.0]]), FlowConfig(steps=steps, t_end=1e-3)
        )
        errs.append(abs(out[0, 0] - math.exp(1 - 1e-3)))
    ratio = errs[0] / errs[1]
    assert 8.0 <= ratio <= 32.0
    _ok(3, f"single-atom flow exact to 1e-8; halving steps changes error x{ratio:.1f} (~16)")


# -- 4 ----------------------------------------------------------------------


def test_criterion_04_continuity_equation_residual():
    sch = affine()
    rng = substream(12, 0)
    data = rng.uniform(-1, 1, (16, 1))
    oracle = EmpiricalOracle(data, sch)
    xs = np.linspace(-2, 2, 81)[:, None]
    h = 1e-4
    worst, max_dpdt = 0.0, 0.0
    for t in np.linspace(0.1, 0.9, 33):
        dpdt = (oracle.density(xs, t + h) - oracle.density(xs, t - h)) / (2 * h)
        flux = lambda xv: oracle.density(xv, t) * oracle.velocity(xv, t)[:, 0]
        dflux = (flux(xs + h) - flux(xs - h)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(dpdt + dflux))))
        max_dpdt = max(max_dpdt, float(np.max(np.abs(dpdt))))
    assert worst <= 1e-3 * max_dpdt
    _ok(4, f"continuity residual {worst:.2e} <= 1e-3 * {max_dpdt:.2e}")


# -- 5 ----------------------------------------------------------------------


def test_criterion_05_wasserstein_exactness():
    rng = np.random.default_rng(77)
    # exact assignment vs exhaustive search over all 720 matchings
    for trial in range(50):
        a = rng.uniform(-1, 1, (6, 2))
        b = rng.uniform(-1, 1, (6, 2))
        p = float(rng.choice([1.0, 2.0]))
        cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2) ** p
        best = min(
            float(np.sort(cost[range(6), perm]).sum())
            for perm in itertools.permutations(range(6))
        )
        rows, cols = linear_sum_assignment(cost)
        solver_total = float(np.sort(cost[rows, cols]).sum())
        assert solver_total == best  # same multiset of matched costs
        assert w_p_exact(EmpiricalMeasure(a), EmpiricalMeasure(b), p) == pytest.approx(
            (best / 6) ** (1 / p), rel=1e-12
        )
    # quantile coupling equals the assignment value in 1D
    for trial in range(100):
        n = int(rng.integers(2, 32))
        a = EmpiricalMeasure(rng.normal(size=(n, 1)))
        b = EmpiricalMeasure(rng.normal(size=(n, 1)))
        p = float(rng.choice([1.0, 2.0]))
        assert abs(w_p_1d(a, b, p) - w_p_exact(a, b, p)) <= 1e-10
    # ordering W1 <= W2
    for trial in range(100):
        n = int(rng.integers(2, 64))
        a = EmpiricalMeasure(rng.normal(size=(n, 1)))
        b = EmpiricalMeasure(rng.normal(size=(n, 1)))
        assert w_p_1d(a, b, 1.0) <= w_p_1d(a, b, 2.0) + 1e-12
    _ok(5, "assignment == brute force (50x), 1D == assignment (100x), W1 <= W2 (100x)")


# -- 6 ----------------------------------------------------------------------


def test_criterion_06_flow_gap_sandwich():
    # v = -x vs vhat = -1.1x in reverse time from 1 to 0.5 (elapsed t = 0.5).
    # The bound is tight for this pair, so pushforwards share initial draws
    # (paired empirical W2; marginals are exactly the two pushforwards).
    elapsed = 0.5
    violations = 0
    for rep in range(20):
        rng = substream(600 + rep, 0)
        start = rng.standard_normal((10_000, 1))
        true_end = integrate(lambda x, t: -x, start, FlowConfig(steps=100, t_end=0.5))
        hat_end = integrate(lambda x, t: -1.1 * x, start, FlowConfig(steps=100, t_end=0.5))
        w2 = w_p_1d(EmpiricalMeasure(true_end), EmpiricalMeasure(hat_end), 2.0)
        value, se = w2_bound_rhs_detail(
            lambda x, s: 1.1 * x,
            lambda x, s: x,
            lambda s, rng: math.exp(s) * rng.standard_normal(1),
            lambda u: 1.1,
            t=elapsed,
            mc=10_000,
            seed=700 + rep,
        )
        violations += w2 > value + 3 * se
    assert violations == 0
    _ok(6, "measured W2 of pushforwards under the Gronwall bound, 20/20 repeats")


# -- 7 ----------------------------------------------------------------------


def test_criterion_07_flow_difference_identity():
    hat = ClosedFormFlow(
        velocity=lambda x, s: -2 * x,
        flow=lambda x, s, t: x * math.exp(-2 * (t - s)),
        flow_grad=lambda x, s, t: math.exp(-2 * (t - s)),
    )
    true = ClosedFormFlow(
        velocity=lambda x, s: -x,
        flow=lambda x, s, t: x * math.exp(-(t - s)),
        flow_grad=lambda x, s, t: math.exp(-(t - s)),
    )
    residual = flow_difference_residual(hat, true, 1.0, 1.0, 10_000)
    assert residual <= 1e-6
    _ok(7, f"flow-difference identity residual {residual:.2e} <= 1e-6")


# -- 8 ----------------------------------------------------------------------


def test_criterion_08_smoothing_gap_bound():
    # 20 (m, sigma) configurations on Uniform[-1,1]^d; common random numbers
    # (X and mX + sigma Z share X) keep both marginals exact and variance low
    configs = [(m, s, 1) for m in (1.0, 0.95, 0.85, 0.7) for s in (0.1, 0.25, 0.4)] + [
        (m, s, 2) for m in (1.0, 0.9, 0.75, 0.6) for s in (0.2, 0.35)
    ]
    assert len(configs) == 20
    n = 4096
    violations = 0
    for idx, (m, sigma, d) in enumerate(configs):
        rng = substream(800 + idx, 0)
        x = rng.uniform(-1, 1, (n, d))
        y = m * x + sigma * rng.standard_normal((n, d))
        a, b = EmpiricalMeasure(x), EmpiricalMeasure(y)
        w2 = w_p_1d(a, b, 2.0) if d == 1 else w_p_exact(a, b, 2.0)
        bound = conv_gap_bound(m, sigma, d / 3.0, d)
        # bootstrap over matched pair costs
        if d == 1:
            costs = (np.sort(x[:, 0]) - np.sort(y[:, 0])) ** 2
        else:
            cost = np.linalg.norm(x[:, None] - y[None, :], axis=2) ** 2
            rows, cols = linear_sum_assignment(cost)
            costs = cost[rows, cols]
        boots = np.sqrt(
            np.mean(costs[rng.integers(0, n, (200, n))], axis=1)
        )
        se = float(boots.std(ddof=1))
        violations += w2 > bound + 3 * se
    assert violations == 0
    _ok(8, "sampled W2(P, P_{m,sigma}) under the closed-form bound, 20/20 configs")


# -- 9 ----------------------------------------------------------------------


def test_criterion_09_kde_equivalence():
    sch = affine()
    rng = substream(31, 0)
    data = rng.uniform(-1, 1, (48, 1))
    oracle = EmpiricalOracle(data, sch)
    # (a) density equals the direct Gaussian-KDE formula
    probes = rng.uniform(-2, 2, (1000, 1))
    for t in (0.04, 0.2, 0.6, 1.0):
        sigma, m, _, _ = sch.eval(t)
        direct = np.mean(
            np.exp(-((probes - m * data[:, 0][None, :]) ** 2) / (2 * sigma**2))
            / (math.sqrt(2 * math.pi) * sigma),
            axis=1,
        )
        assert np.allclose(oracle.density(probes, t), direct, rtol=1e-12, atol=0)
    # (b) pushing the exact oracle flow lands on the mixture at T0 (1D KS)
    t0 = 1e-2
    cfg = FlowConfig(method="rk4", steps=150, spacing="log", t_end=t0)
    gen = push_samples(oracle.velocity, 33, 10_000, cfg, dim=1)[:, 0]
    cdf = np.sort(oracle.mixture_cdf_1d(np.sort(gen), t0))
    ranks = np.arange(1, gen.size + 1) / gen.size
    ks = float(np.max(np.maximum(np.abs(cdf - ranks), np.abs(cdf - ranks + 1.0 / gen.size))))
    crit = math.sqrt(-math.log(0.5e-3) / 2.0) / math.sqrt(gen.size)
    assert ks < crit
    _ok(9, f"oracle density == KDE formula at 1e-12; pushforward KS {ks:.4f} < {crit:.4f}")


# -- 10 ---------------------------------------------------------------------


def test_criterion_10_bspline_rate_trend():
    sweep = rate_sweep(
        lambda x: np.sin(math.pi * np.asarray(x)), s_label=3.0, dim=1,
        budgets=[16, 32, 64, 128], order=3,
    )
    assert sweep.slope <= -2.5
    member = SplineBasisIndex(order=3, level=(3,), shift=(2,))
    f = lambda x: eval_tensor(member, np.asarray(x)[:, None])
    approx = spline_fit(f, 32, order=3, dim=1)
    resid = l2_error(f, approx)
    assert resid <= 1e-10
    _ok(10, f"sin fit slope {sweep.slope:.2f} <= -2.5; in-span residual {resid:.1e}")


# -- 11 / 12 ----------------------------------------------------------------


def rate_experiment_config() -> ExperimentConfig:
    return ExperimentConfig(
        name="rate-1d-acceptance",
        pipeline="train",
        mode="dyadic",
        t0_mode="theory-smooth",
        t0_min=1e-6,
        delta=0.05,
        n_grid=(128, 256, 512, 1024, 2048, 4096),
        n_seeds=5,
        base_seed=2025,
        target_kind="spline_mixture",
        target_dim=1,
        target_params={"smoothness": 2},
        schedules={
            "vp": {"family": "variance_preserving"},
            "affine": {"family": "affine"},
        },
        train_steps=1200,
        train_batch=512,
        train_lr=4e-3,
        width_scale=10.0,
        eval_p=(1.0,),
        estimator="quantile-true",
        n_gen=16384,
        ode_steps_per_interval=8,
    )


@pytest.fixture(scope="module")
def rate_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("rate") / "main"
    summary = run(rate_experiment_config(), out, parallel=8)
    return out, summary


def test_criterion_11_rate_trend(rate_run):
    out, summary = rate_run
    slopes = {row["schedule"]: row for row in summary["slopes"]}
    assert summary["failed_fraction"] == 0.0

    # (a) seed-averaged W1 decreases in n, at most one inversion per schedule
    for name in ("vp", "affine"):
        values = [v for _, v in slopes[name]["points"]]
        inversions = sum(b > a for a, b in zip(values, values[1:]))
        assert inversions <= 1, f"{name}: {values}"

    # (b) kappa=1/2 fits a steeper slope than kappa=1 by at least 0.05
    gap = slopes["affine"]["slope"] - slopes["vp"]["slope"]
    assert gap >= 0.05, f"slope gap {gap:.3f}"

    # (c) kappa=1/2 slope within +-0.15 of the theory exponent
    exponent = theory.upper_rate_exponent(
        theory.RateContext(s=2.0, d=1, kappa=0.5, delta=0.0, n=4096)
    )
    assert abs(slopes["vp"]["slope"] + exponent) <= 0.15, (
        f"vp slope {slopes['vp']['slope']:.3f} vs -{exponent}"
    )
    _ok(
        11,
        f"vp slope {slopes['vp']['slope']:+.3f} (theory -{exponent:.2f}), "
        f"affine {slopes['affine']['slope']:+.3f}, gap {gap:.3f} >= 0.05",
    )


def test_criterion_12_determinism(rate_run, tmp_path_factory):
    out, _ = rate_run
    reference = (out / "results.csv").read_bytes()
    for parallel in (1, 8):
        rerun_dir = tmp_path_factory.mktemp("rate") / f"p{parallel}"
        run(rate_experiment_config(), rerun_dir, parallel=parallel)
        assert (rerun_dir / "results.csv").read_bytes() == reference, f"parallel={parallel}"
    _ok(12, "results.csv byte-identical across reruns at parallelism 1 and 8")
