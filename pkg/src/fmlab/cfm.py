"""Conditional paths, velocity targets, exact empirical oracles, and the
training loss.

The conditional location and teaching vector at reverse time t given a data
point x1 and a Gaussian draw eps are

    x_t = sigma_t * eps + m_t * x1
    v_t = sigma_t' * eps + m_t' * x1,

and eliminating eps gives the conditional field
v_t(x | x1) = sigma_t' (x - m_t x1)/sigma_t + m_t' x1.

For an empirical data set the posterior-averaged field and the marginal
density have closed forms: softmax-weighted data means and a Gaussian
mixture with bandwidth sigma_t at centers m_t * y_j.  They are the exact
optimum of the training loss, so they serve as oracles for everything the
trained networks are supposed to approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf

from .schedules import Schedule
from .seeding import substream

# Velocity fields are callables f(x, t) with x of shape (..., d) and t a
# scalar or an array broadcastable against the leading axes; they return an
# array shaped like x.
VelocityField = Callable[[np.ndarray, float | np.ndarray], np.ndarray]

_SIGMA_FLOOR = 1e-300


class CfmError(ValueError):
    pass


class PathSample(NamedTuple):
    t: float
    x_t: np.ndarray
    v_target: np.ndarray


def sample_path_point(schedule: Schedule, t: float, x1, seed: int) -> PathSample:
    """Draw eps ~ N(0, I) from the seed and form the teaching pair at (x_t, t)."""
    if not 0.0 < t <= 1.0:
        raise CfmError(f"t={t} outside (0, 1]")
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    rng = substream(seed, 0)
    eps = rng.standard_normal(x1.shape)
    sigma, m, dsigma, dm = schedule.eval(t)
    return PathSample(t, sigma * eps + m * x1, dsigma * eps + dm * x1)


def conditional_velocity(schedule: Schedule, t: float, x, x1) -> np.ndarray:
    """sigma'(x - m x1)/sigma + m' x1, the teaching field conditioned on x1."""
    sigma, m, dsigma, dm = schedule.eval(t)
    if sigma < _SIGMA_FLOOR:
        raise CfmError(f"sigma underflow at t={t}")
    x = np.asarray(x, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    return dsigma * (x - m * x1) / sigma + dm * x1


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    return np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)


@dataclass
class EmpiricalOracle:
    """Exact averaged field and marginal density for an empirical data set."""

    data: np.ndarray  # (n, d)
    schedule: Schedule

    def __post_init__(self):
        pts = np.asarray(self.data, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise CfmError("data must be a nonempty (n, d) array")
        self.data = pts

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _coeffs(self, t):
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            sigma, m, dsigma, dm = self.schedule.eval(float(t))
        else:
            sigma, m, dsigma, dm = self.schedule.eval_arrays(np.asarray(t, dtype=float))
        if np.any(np.asarray(sigma) < _SIGMA_FLOOR):
            raise CfmError("sigma underflow")
        return sigma, m, dsigma, dm

    def _log_weights(self, x: np.ndarray, m, sigma) -> np.ndarray:
        # (B, n): -|x - m y_j|^2 / (2 sigma^2), broadcast over per-row m, sigma
        m = np.asarray(m)[..., None]
        sigma = np.asarray(sigma)[..., None]
        d2 = ((x[..., None, :] - m[..., None] * self.data[None, :, :]) ** 2).sum(axis=-1)
        return -d2 / (2.0 * sigma**2)

    def posterior_mean(self, x, t) -> np.ndarray:
        """Softmax-weighted mean of the data given location x at time t."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sigma, m, _, _ = self._coeffs(t)
        logw = self._log_weights(x, m, sigma)
        logw -= logw.max(axis=-1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=-1, keepdims=True)
        return w @ self.data

    def velocity(self, x, t) -> np.ndarray:
        """Averaged field sigma'(x - m ybar)/sigma + m' ybar at (x, t)."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        # keep the (B, n) weight matrix under ~32M entries
        max_rows = max(1, int(4_000_000 // max(self.data.shape[0], 1)) * 8)
        if pts.shape[0] > max_rows and np.ndim(t) == 0:
            out = np.concatenate(
                [self.velocity(pts[i : i + max_rows], t) for i in range(0, pts.shape[0], max_rows)]
            )
            return out[0] if squeeze else out
        sigma, m, dsigma, dm = self._coeffs(t)
        ybar = self.posterior_mean(pts, t)
        sigma_c = np.asarray(sigma)[..., None]
        out = (
            np.asarray(dsigma)[..., None] * (pts - np.asarray(m)[..., None] * ybar) / sigma_c
            + np.asarray(dm)[..., None] * ybar
        )
        return out[0] if squeeze else out

    __call__ = velocity

    def log_density(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sigma, m, _, _ = self._coeffs(t)
        logw = self._log_weights(x, m, sigma)
        n, d = self.data.shape
        return (
            _logsumexp(logw, axis=-1)
            - math.log(n)
            - d * (0.5 * math.log(2.0 * math.pi) + np.log(np.asarray(sigma)))
        )

    def density(self, x, t) -> np.ndarray:
        """Gaussian-mixture marginal: mean_j N(x; m_t y_j, sigma_t^2 I)."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        val = np.exp(self.log_density(np.atleast_2d(x), t))
        return float(val[0]) if squeeze else val

    def sample_mixture(self, t: float, size: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draw from the marginal at time t (center choice + Gaussian)."""
        sigma, m, _, _ = self._coeffs(t)
        idx = rng.integers(0, self.data.shape[0], size)
        return m * self.data[idx] + sigma * rng.standard_normal((size, self.dim))

    def mixture_cdf_1d(self, x, t) -> np.ndarray:
        if self.dim != 1:
            raise CfmError("mixture_cdf_1d requires d = 1")
        sigma, m, _, _ = self._coeffs(t)
        z = (np.asarray(x, dtype=float)[..., None] - m * self.data[None, :, 0]) / sigma
        return np.mean(0.5 * (1.0 + erf(z / math.sqrt(2.0))), axis=-1)


def fm_loss(
    field: VelocityField,
    data: np.ndarray,
    schedule: Schedule,
    t_lo: float,
    t_hi: float,
    seed: int,
    mc: int,
    normalize: bool = True,
) -> float:
    """Monte-Carlo estimate of the regression loss of `field` on the interval.

    Per data point, `mc` draws with stratified t (one uniform draw per
    equispaced stratum) and fresh Gaussian eps; each data point owns a seed
    substream so the value does not depend on evaluation order.  With
    normalize=True the value estimates the time-average of the squared error;
    otherwise it carries the raw dt-integral scaling (t_hi - t_lo).
    """
    if not (0.0 < t_lo < t_hi <= 1.0):
        raise CfmError(f"invalid interval [{t_lo}, {t_hi}]")
    if mc < 1:
        raise CfmError("mc must be >= 1")
    pts = np.asarray(data, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape

    strata = (np.arange(mc) + 0.0) / mc
    t_all = np.empty((n, mc))
    eps_all = np.empty((n, mc, d))
    for i in range(n):
        rng = substream(seed, i)
        t_all[i] = t_lo + (strata + rng.random(mc)) / mc * (t_hi - t_lo)
        eps_all[i] = rng.standard_normal((mc, d))

    t_flat = t_all.reshape(-1)
    eps = eps_all.reshape(-1, d)
    x1 = np.repeat(pts, mc, axis=0)
    sigma, m, dsigma, dm = schedule.eval_arrays(t_flat)
    x_t = sigma[:, None] * eps + m[:, None] * x1
    v = dsigma[:, None] * eps + dm[:, None] * x1
    pred = field(x_t, t_flat)
    sq = ((np.asarray(pred) - v) ** 2).sum(axis=1)
    value = float(sq.mean())
    return value if normalize else value * (t_hi - t_lo)
