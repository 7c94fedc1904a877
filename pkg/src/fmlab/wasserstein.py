"""Wasserstein distance estimators between empirical measures.

Three estimation routes, by regime:

* d = 1: exact quantile coupling (sorted merge), any weights, any p >= 1.
* d >= 2, n <= 4096, equal sizes: exact minimum-cost perfect matching.
* larger n: debiased entropic (Sinkhorn) surrogate with a convergence flag.

Plus the closed-form smoothing-gap bound
W_2(P, P_{m,sigma}) <= sqrt((1-m)^2 V + d sigma^2) used to price early
stopping of the reverse flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

EXACT_SIZE_CAP = 4096


class WassersteinError(ValueError):
    pass


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud; weights default to uniform and must sum to 1."""

    points: np.ndarray  # (n, d)
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise WassersteinError("points must be a nonempty (n, d) array")
        self.points = pts
        if self.weights is None:
            self.weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],) or np.any(w < 0):
                raise WassersteinError("weights must be nonnegative, one per point")
            if abs(w.sum() - 1.0) > 1e-12:
                raise WassersteinError("weights must sum to 1 within 1e-12")
            self.weights = w

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def w_p_1d(a: EmpiricalMeasure, b: EmpiricalMeasure, p: float = 2.0) -> float:
    """Exact W_p on the line via the quantile coupling.

    Merges the two cumulative-weight staircases; on each merged slab the
    optimal plan pairs the current quantiles, so the distance is
    (sum_k du_k |xa_k - xb_k|^p)^(1/p).
    """
    if a.dim != 1 or b.dim != 1:
        raise WassersteinError("w_p_1d requires 1-dimensional measures")
    if p < 1:
        raise WassersteinError("p must be >= 1")
    xa = a.points[:, 0]
    xb = b.points[:, 0]
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa = xa[ia], a.weights[ia]
    xb, wb = xb[ib], b.weights[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    # merged slab boundaries in [0, 1]
    u = np.union1d(ca, cb)
    du = np.diff(np.concatenate(([0.0], u)))
    ja = np.searchsorted(ca, u - 1e-15, side="left")
    jb = np.searchsorted(cb, u - 1e-15, side="left")
    ja = np.minimum(ja, xa.size - 1)
    jb = np.minimum(jb, xb.size - 1)
    cost = float(np.sum(du * np.abs(xa[ja] - xb[jb]) ** p))
    return cost ** (1.0 / p)


def w_p_exact(a: EmpiricalMeasure, b: EmpiricalMeasure, p: float = 2.0) -> float:
    """Exact W_p by minimum-cost perfect matching (equal sizes, uniform weights).

    ((1/n) * min-cost matching with cost |x_i - y_j|^p)^(1/p).  Capped at
    n = 4096 because the assignment solve is cubic in the worst case.
    """
    if p < 1:
        raise WassersteinError("p must be >= 1")
    if a.n != b.n:
        raise WassersteinError("w_p_exact requires equal sizes; resample upstream")
    if a.n > EXACT_SIZE_CAP:
        raise WassersteinError(f"n={a.n} above the exact-solver cap {EXACT_SIZE_CAP}")
    for m in (a, b):
        if not np.allclose(m.weights, 1.0 / m.n, rtol=0, atol=1e-12):
            raise WassersteinError("w_p_exact requires uniform weights")
    diff = a.points[:, None, :] - b.points[None, :, :]
    cost = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols]) ** (1.0 / p))


class SinkhornResult(NamedTuple):
    value: float
    converged: bool
    iterations: int
    marginal_violation: float


def _sinkhorn_cost(
    cost: np.ndarray, wa: np.ndarray, wb: np.ndarray, eps: float, max_iter: int, tol: float
) -> tuple[float, bool, int, float]:
    """Log-domain Sinkhorn; returns transport cost <P, C> of the entropic plan."""
    log_wa = np.log(wa)
    log_wb = np.log(wb)
    f = np.zeros_like(wa)
    g = np.zeros_like(wb)
    it = 0
    violation = np.inf
    for it in range(1, max_iter + 1):
        # f_i = -eps * log sum_j exp((g_j - C_ij)/eps + log wb_j)
        mat = (g[None, :] - cost) / eps + log_wb[None, :]
        f = -eps * _logsumexp(mat, axis=1)
        mat = (f[:, None] - cost) / eps + log_wa[:, None]
        g = -eps * _logsumexp(mat, axis=0)
        if it % 10 == 0 or it == max_iter:
            log_plan = (f[:, None] + g[None, :] - cost) / eps + log_wa[:, None] + log_wb[None, :]
            plan = np.exp(log_plan)
            violation = max(
                float(np.abs(plan.sum(axis=1) - wa).max()),
                float(np.abs(plan.sum(axis=0) - wb).max()),
            )
            if violation <= tol:
                break
    log_plan = (f[:, None] + g[None, :] - cost) / eps + log_wa[:, None] + log_wb[None, :]
    plan = np.exp(log_plan)
    violation = max(
        float(np.abs(plan.sum(axis=1) - wa).max()),
        float(np.abs(plan.sum(axis=0) - wb).max()),
    )
    return float(np.sum(plan * cost)), violation <= tol, it, violation


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def sinkhorn_w_p(
    a: EmpiricalMeasure,
    b: EmpiricalMeasure,
    p: float = 2.0,
    eps: float = 0.01,
    max_iter: int = 5000,
    tol: float = 1e-6,
) -> SinkhornResult:
    """Debiased entropic surrogate for W_p.

    Computes the sharp transport cost of the entropic plan and removes the
    self-transport bias, value = (<P_ab,C> - (<P_aa,C> + <P_bb,C>)/2)^(1/p),
    clamped at zero.  The flag records whether the marginal violation dropped
    below `tol` within `max_iter` iterations.
    """
    if eps <= 0:
        raise WassersteinError("eps must be positive")
    if p < 1:
        raise WassersteinError("p must be >= 1")

    def pair_cost(x: EmpiricalMeasure, y: EmpiricalMeasure) -> np.ndarray:
        diff = x.points[:, None, :] - y.points[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p

    c_ab, ok_ab, it_ab, viol = _sinkhorn_cost(pair_cost(a, b), a.weights, b.weights, eps, max_iter, tol)
    c_aa, ok_aa, _, _ = _sinkhorn_cost(pair_cost(a, a), a.weights, a.weights, eps, max_iter, tol)
    c_bb, ok_bb, _, _ = _sinkhorn_cost(pair_cost(b, b), b.weights, b.weights, eps, max_iter, tol)
    debiased = max(c_ab - 0.5 * (c_aa + c_bb), 0.0)
    return SinkhornResult(debiased ** (1.0 / p), ok_ab and ok_aa and ok_bb, it_ab, viol)


def conv_gap_bound(m: float, sigma: float, v_second_moment: float, d: int) -> float:
    """Upper bound on W_2 between P and its scaled Gaussian smoothing P_{m,sigma}.

    The coupling X = m*Y + sigma*Z against Y gives
    E|X - Y|^2 = (1-m)^2 * E|Y|^2 + d * sigma^2.
    """
    if v_second_moment < 0 or sigma < 0 or not 0.0 <= m <= 1.0:
        raise WassersteinError("need V >= 0, sigma >= 0, m in [0, 1]")
    return float(np.sqrt((1.0 - m) ** 2 * v_second_moment + d * sigma**2))
