import math

import numpy as np
import pytest

from fmlab import theory
from fmlab.schedules import affine, power_law, variance_preserving


def ctx(s, d, kappa, delta=0.0, n=1024):
    return theory.RateContext(s=s, d=d, kappa=kappa, delta=delta, n=n)


def test_upper_rate_examples():
    assert theory.upper_rate_exponent(ctx(1, 2, 0.5)) == 0.5
    assert theory.upper_rate_exponent(ctx(1, 2, 1.0)) == 0.375


def test_upper_equals_lower_at_half():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = float(rng.uniform(0.2, 5.0))
        d = int(rng.integers(2, 9))
        assert theory.upper_rate_exponent(ctx(s, d, 0.5)) == theory.minimax_lower_exponent(s, d)


def test_upper_decreasing_in_kappa():
    vals = [theory.upper_rate_exponent(ctx(1.5, 3, k)) for k in (0.5, 0.7, 1.0, 1.5, 2.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_minimax_lower_examples():
    assert theory.minimax_lower_exponent(1, 2) == 0.5
    assert theory.minimax_lower_exponent(2, 4) == 0.375
    with pytest.raises(ValueError):
        theory.minimax_lower_exponent(1, 1)


def test_kde_exponent():
    assert theory.kde_exponent(1) == pytest.approx(0.8)
    assert theory.kde_exponent(4) == pytest.approx(0.5)
    vals = [theory.kde_exponent(d) for d in range(1, 30)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_basis_count():
    assert theory.n_to_basis_count(10**4, 1, 2) == 100
    assert theory.n_to_basis_count(2, 1, 2) == 1
    grid = [theory.n_to_basis_count(n, 1.5, 2) for n in (10, 100, 1000, 10000)]
    assert all(b >= a for a, b in zip(grid, grid[1:]))


def test_covering_log_bound():
    assert theory.covering_log_bound(1, 1, 1, 1, eps=1 / math.e, n=1) == pytest.approx(1.0)
    one = theory.covering_log_bound(3, 4, 10, 2, eps=0.01, n=100)
    assert theory.covering_log_bound(6, 4, 10, 2, eps=0.01, n=100) == pytest.approx(2 * one)
    with pytest.raises(ValueError):
        theory.covering_log_bound(1, 1, 1, 1, eps=2.0, n=1)


def test_theta_n_values():
    # affine at t0: sigma = t0, 1 - m = t0
    val = theory.theta_n(affine(), 1e-2, v_second_moment=1 / 3, d=1)
    assert val == pytest.approx(math.sqrt(1e-4 / 3 + 1e-4), rel=1e-12)
    # variance preserving at 1e-4: sigma = 1e-2 dominates
    val = theory.theta_n(variance_preserving(), 1e-4, v_second_moment=1 / 3, d=1)
    assert val == pytest.approx(1e-2, rel=1e-2)


def test_theta_n_vanishes_as_t0_shrinks():
    sch = power_law(1.0, 0.5, 0.5, 1.0)
    vals = [theory.theta_n(sch, t0, 1 / 3, 1) for t0 in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


def test_context_validation():
    with pytest.raises(ValueError):
        ctx(1, 2, 0.4)
    with pytest.raises(ValueError):
        ctx(-1, 2, 0.5)
    with pytest.raises(ValueError):
        theory.RateContext(s=1, d=2, kappa=0.5, delta=2.5, n=100)
