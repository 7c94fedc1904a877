"""Closed-form exponents, sizing rules, and bound calculators.

Every experiment report attaches values from here so measured slopes can be
read against what the asymptotic theory predicts.  All comparisons are modulo
poly(log n) factors, which these formulas do not carry.
"""

from __future__ import annotations

from dataclasses import dataclass

from .schedules import Schedule
from .wasserstein import conv_gap_bound


@dataclass(frozen=True)
class RateContext:
    s: float
    d: int
    kappa: float
    delta: float
    n: int

    def __post_init__(self):
        if self.s <= 0 or self.d < 1 or self.n < 2:
            raise ValueError("need s > 0, d >= 1, n >= 2")
        if self.kappa < 0.5:
            raise ValueError("kappa must be >= 1/2")
        if not 0 <= self.delta < 1.0 / self.kappa:
            raise ValueError("need 0 <= delta < 1/kappa")


def upper_rate_exponent(ctx: RateContext) -> float:
    """Exponent r in the achievable W_2 rate n^-r for schedule exponent kappa."""
    return (ctx.s + 1.0 / (2.0 * ctx.kappa) - ctx.delta) / (2.0 * ctx.s + ctx.d)


def minimax_lower_exponent(s: float, d: int) -> float:
    """Exponent of the minimax lower bound over smoothness-s densities, d >= 2."""
    if d < 2:
        raise ValueError("the minimax lower bound requires d >= 2")
    return (s + 1.0) / (2.0 * s + d)


def kde_exponent(d: int) -> float:
    """MSE-rate exponent of the fixed-bandwidth Gaussian KDE endpoint."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return 4.0 / (4.0 + d)


def n_to_basis_count(n: int, s: float, d: int) -> int:
    """Basis budget N = round(n^(d/(2s+d))) balancing bias and complexity."""
    if n < 2:
        raise ValueError("n must be >= 2")
    return int(round(n ** (d / (2.0 * s + d))))


def covering_log_bound(S: float, L: float, wmax: float, B: float, eps: float, n: int) -> float:
    """Log covering number proxy S * L * log(wmax * B * n / eps)."""
    import math

    if min(S, L, wmax, B, eps) <= 0 or n <= 0 or eps >= 1:
        raise ValueError("all arguments positive, eps < 1")
    return S * L * math.log(wmax * B * n / eps)


def theta_n(schedule: Schedule, t0: float, v_second_moment: float, d: int) -> float:
    """W_2 gap paid by stopping the reverse flow at t0 instead of 0.

    Evaluated exactly from the smoothing coefficients at the stopped time
    rather than from their small-t asymptotics.
    """
    if not 0.0 < t0 < 1.0:
        raise ValueError("t0 must lie in (0, 1)")
    vals = schedule.eval(t0)
    return conv_gap_bound(vals.m, vals.sigma, v_second_moment, d)
