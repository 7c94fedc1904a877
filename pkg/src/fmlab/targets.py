"""Synthetic ground-truth densities on [-1, 1]^d with exact samplers.

Three kinds, all bounded above and below on the cube and flat in a collar
near the boundary so the interior smoothness label is the only one that
matters:

* uniform: the flat density, closed-form everything.
* spline_mixture: a constant base plus a B-spline expansion whose members
  are supported strictly inside the cube; piecewise polynomial, smoothness
  C^(order-1), sampled by (conditional) inverse CDF.
* perturbed_uniform: polynomial bumps (1-u^2)^q on interior windows;
  analytic CDF in 1D, rejection sampling in 2D.

Samplers are deterministic functions of (seed, n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from .bspline import eval_cardinal
from .seeding import substream


class TargetError(ValueError):
    pass


class RejectionError(RuntimeError):
    """Rejection sampler acceptance collapsed; the density is malformed."""


class TargetDensity:
    """Common interface: exact pdf, exact seeded sampler, declared smoothness."""

    dim: int
    kind: str
    smoothness: float
    c0: float

    def pdf(self, x) -> np.ndarray:
        raise NotImplementedError

    def sample(self, seed: int, n: int) -> np.ndarray:
        raise NotImplementedError

    def second_moment(self) -> float:
        """E |Y|^2 under the density (enters smoothing-gap bounds)."""
        raise NotImplementedError

    # 1D extras used by the exact Wasserstein metrology
    def cdf(self, x) -> np.ndarray:
        raise NotImplementedError(f"cdf not available for {self.kind} in d={self.dim}")

    def quantile(self, u) -> np.ndarray:
        raise NotImplementedError

    def quantile_table(self, size: int = 65537) -> tuple[np.ndarray, np.ndarray]:
        """Cached dense table of the quantile function on a uniform u-grid.

        Built by inverting the CDF on an x-grid of the same size; the density
        is bounded below on the cube, so the inverse interpolation error is
        O(size^-2) and far below any distance this lab measures.
        """
        cached = getattr(self, "_qtable", None)
        if cached is not None and cached[0].size == size:
            return cached
        x = np.linspace(-1.0, 1.0, size)
        cu = np.asarray(self.cdf(x))
        cu[0], cu[-1] = 0.0, 1.0
        cu = np.maximum.accumulate(cu)
        u = np.linspace(0.0, 1.0, size)
        q = np.interp(u, cu, x)
        self._qtable = (u, q)
        return self._qtable

    def _clip_outside(self, x: np.ndarray, values: np.ndarray) -> np.ndarray:
        inside = np.all(np.abs(x) <= 1.0, axis=-1)
        return np.where(inside, values, 0.0)


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0 and dim == 1:
        return pts.reshape(1, 1), True
    if pts.ndim == 1:
        if dim == 1:
            return pts[:, None], False
        return pts[None, :], True
    return pts, False


def _bisect_quantile(cdf, u: np.ndarray, iters: int = 64) -> np.ndarray:
    lo = np.full_like(u, -1.0)
    hi = np.full_like(u, 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Uniform
# ---------------------------------------------------------------------------


class Uniform(TargetDensity):
    kind = "uniform"

    def __init__(self, dim: int = 1, smoothness: float = 2.0):
        if dim < 1:
            raise TargetError("dim must be >= 1")
        self.dim = dim
        self.smoothness = float(smoothness)
        self.c0 = 2.0**dim  # max(sup p, 1/inf p) for p = 2^-d is 2^d

    def pdf(self, x):
        pts, squeeze = _as_points(x, self.dim)
        val = np.full(pts.shape[0], 2.0**-self.dim)
        val = self._clip_outside(pts, val)
        return float(val[0]) if squeeze else val

    def sample(self, seed, n):
        if n < 1:
            raise TargetError("n must be >= 1")
        rng = substream(seed, 0)
        return rng.uniform(-1.0, 1.0, size=(n, self.dim))

    def second_moment(self):
        return self.dim / 3.0

    def cdf(self, x):
        if self.dim != 1:
            return super().cdf(x)
        return np.clip((np.asarray(x, dtype=float) + 1.0) / 2.0, 0.0, 1.0)

    def quantile(self, u):
        if self.dim != 1:
            return super().quantile(u)
        return 2.0 * np.asarray(u, dtype=float) - 1.0


# ---------------------------------------------------------------------------
# Spline mixtures
# ---------------------------------------------------------------------------


class _SplineProfile1D:
    """Unnormalized base + B-spline expansion on [-1, 1], with exact CDF.

    Basis member j is B_order(2^level (x+1) - j); requiring
    j + order + 1 <= 2^(level+1) keeps every support inside the domain, so
    the profile is constant (= base) in the boundary collar.
    """

    def __init__(self, level: int, order: int, coeffs: np.ndarray, base: float):
        self.level = level
        self.order = order
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.base = float(base)
        self.n_basis = 2 ** (level + 1) - order
        if self.coeffs.shape != (self.n_basis,):
            raise TargetError(
                f"level {level} order {order} needs {self.n_basis} coefficients, "
                f"got {self.coeffs.shape}"
            )
        self.edges = np.linspace(-1.0, 1.0, 2 ** (level + 1) + 1)
        q = order + 1
        self._gx, self._gw = leggauss(q)
        self.mass = self.base * 2.0 + float(self.coeffs.sum()) * 2.0**-level
        self._panel_cum = self._panel_cumulative()

    def basis_matrix(self, x: np.ndarray) -> np.ndarray:
        u = 2.0**self.level * (np.asarray(x, dtype=float) + 1.0)
        j = np.arange(self.n_basis)
        return eval_cardinal(self.order, u[..., None] - j)

    def raw(self, x: np.ndarray) -> np.ndarray:
        return self.base + self.basis_matrix(x) @ self.coeffs

    def _panel_cumulative(self) -> np.ndarray:
        a, b = self.edges[:-1], self.edges[1:]
        half = (b - a) / 2.0
        nodes = (a + b)[:, None] / 2.0 + half[:, None] * self._gx[None, :]
        vals = self.raw(nodes.ravel()).reshape(nodes.shape)
        masses = half * (vals @ self._gw)
        return np.concatenate(([0.0], np.cumsum(masses)))

    def cdf_raw(self, x: np.ndarray) -> np.ndarray:
        """Integral of the raw profile from -1 to x (exact for the polynomial)."""
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        idx = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.edges.size - 2)
        a = self.edges[idx]
        half = (x - a) / 2.0
        nodes = (a + x)[..., None] / 2.0 + half[..., None] * self._gx
        vals = self.raw(nodes.reshape(-1)).reshape(nodes.shape)
        partial = half * (vals @ self._gw)
        return self._panel_cum[idx] + partial


@dataclass
class _SplineSpec:
    level: int
    order: int


class SplineMixture(TargetDensity):
    """Normalized base + spline expansion; tensor coefficients in 2D."""

    kind = "spline_mixture"

    def __init__(
        self,
        dim: int,
        level: int,
        order: int,
        coeffs,
        base: float = 1.0,
        smoothness: float | None = None,
    ):
        if dim not in (1, 2):
            raise TargetError("spline_mixture supports d in {1, 2}")
        self.dim = dim
        self.level = level
        self.order = order
        self.base = float(base)
        n_b = 2 ** (level + 1) - order
        coeffs = np.asarray(coeffs, dtype=float)
        if dim == 1:
            if coeffs.shape != (n_b,):
                raise TargetError(f"need {n_b} coefficients, got {coeffs.shape}")
            self._profile = _SplineProfile1D(level, order, coeffs, base)
            self.norm = self._profile.mass
        else:
            if coeffs.shape != (n_b, n_b):
                raise TargetError(f"need ({n_b},{n_b}) coefficients, got {coeffs.shape}")
            self.coeffs2 = coeffs
            self.norm = 4.0 * base + float(coeffs.sum()) * 4.0**-level
            # marginal in x is itself a profile (y integrated out)
            self._marginal_x = _SplineProfile1D(level, order, 2.0**-level * coeffs.sum(axis=1), 2.0 * base)
        self.smoothness = float(smoothness) if smoothness is not None else float(order - 1)
        self._check_positive()

    def _check_positive(self):
        grid1 = np.linspace(-1.0, 1.0, 4097)
        if self.dim == 1:
            vals = self._profile.raw(grid1) / self.norm
        else:
            g = np.linspace(-1.0, 1.0, 257)
            xx, yy = np.meshgrid(g, g, indexing="ij")
            pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
            vals = self.pdf(pts)
        lo, hi = float(vals.min()), float(vals.max())
        if lo <= 0:
            raise TargetError("spline mixture is not strictly positive on the cube")
        # 1% headroom covers off-grid extrema of the piecewise polynomial
        self.c0 = 1.01 * max(hi, 1.0 / lo)

    def pdf(self, x):
        pts, squeeze = _as_points(x, self.dim)
        if self.dim == 1:
            val = self._profile.raw(pts[:, 0]) / self.norm
        else:
            bx = self._basis(pts[:, 0])
            by = self._basis(pts[:, 1])
            val = (self.base + np.einsum("pi,ij,pj->p", bx, self.coeffs2, by)) / self.norm
        val = self._clip_outside(pts, val)
        return float(val[0]) if squeeze else val

    def _basis(self, x: np.ndarray) -> np.ndarray:
        u = 2.0**self.level * (x + 1.0)
        j = np.arange(2 ** (self.level + 1) - self.order)
        return eval_cardinal(self.order, u[:, None] - j[None, :])

    def cdf(self, x):
        if self.dim != 1:
            return super().cdf(x)
        return self._profile.cdf_raw(np.asarray(x, dtype=float)) / self.norm

    def quantile(self, u):
        if self.dim != 1:
            return super().quantile(u)
        return _bisect_quantile(self.cdf, np.asarray(u, dtype=float))

    def sample(self, seed, n):
        if n < 1:
            raise TargetError("n must be >= 1")
        rng = substream(seed, 0)
        if self.dim == 1:
            u_grid, q_grid = self.quantile_table()
            return np.interp(rng.random(n), u_grid, q_grid)[:, None]
        # conditional inverse CDF: x from the marginal, then y | x
        u1 = rng.random(n)
        u2 = rng.random(n)
        xm = _bisect_quantile(lambda x: self._marginal_x.cdf_raw(x) / self.norm, u1)
        beta = self._basis(xm) @ self.coeffs2  # per-row conditional coefficients
        y = self._conditional_quantile(beta, u2)
        return np.stack([xm, y], axis=1)

    def _conditional_quantile(self, beta: np.ndarray, u: np.ndarray) -> np.ndarray:
        prof = self._marginal_x  # reuse panel geometry
        edges = prof.edges
        gx, gw = prof._gx, prof._gw
        j = np.arange(beta.shape[1])

        a, b = edges[:-1], edges[1:]
        half = (b - a) / 2.0
        nodes = (a + b)[:, None] / 2.0 + half[:, None] * gx[None, :]
        bmat = eval_cardinal(self.order, (2.0**self.level * (nodes.ravel() + 1.0))[:, None] - j)
        basis_panel = (bmat.reshape(nodes.shape + (j.size,)) * gw[None, :, None]).sum(axis=1) * half[:, None]
        panel_masses = self.base * np.diff(edges)[None, :] + beta @ basis_panel.T
        cum = np.concatenate([np.zeros((beta.shape[0], 1)), np.cumsum(panel_masses, axis=1)], axis=1)
        total = cum[:, -1]

        def cond_cdf(y: np.ndarray) -> np.ndarray:
            idx = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, edges.size - 2)
            aa = edges[idx]
            hh = (y - aa) / 2.0
            pts = (aa + y)[:, None] / 2.0 + hh[:, None] * gx[None, :]
            bm = eval_cardinal(self.order, (2.0**self.level * (pts.ravel() + 1.0))[:, None] - j)
            bm = bm.reshape(pts.shape + (j.size,))
            raw = self.base + np.einsum("pqj,pj->pq", bm, beta)
            partial = hh * (raw @ gw)
            return (cum[np.arange(y.size), idx] + partial) / total

        return _bisect_quantile(cond_cdf, u)

    def second_moment(self):
        g1 = _SplineProfile1D(self.level, self.order, np.zeros(2 ** (self.level + 1) - self.order), 0.0)
        edges = g1.edges
        gx, gw = leggauss(self.order + 3)
        a, b = edges[:-1], edges[1:]
        half = (b - a) / 2.0
        nodes = ((a + b)[:, None] / 2.0 + half[:, None] * gx[None, :]).ravel()
        wts = (half[:, None] * gw[None, :]).ravel()
        if self.dim == 1:
            return float(np.sum(wts * nodes**2 * self.pdf(nodes[:, None])))
        xx, yy = np.meshgrid(nodes, nodes, indexing="ij")
        ww = (wts[:, None] * wts[None, :]).ravel()
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        return float(np.sum(ww * (pts**2).sum(axis=1) * self.pdf(pts)))


# ---------------------------------------------------------------------------
# Perturbed uniform
# ---------------------------------------------------------------------------


class PerturbedUniform(TargetDensity):
    """Uniform plus separable polynomial bumps (1-u^2)^q on interior windows."""

    kind = "perturbed_uniform"

    def __init__(
        self,
        dim: int,
        amplitudes: Sequence[float],
        centers: Sequence[Sequence[float]],
        widths: Sequence[float],
        q: int = 3,
        smoothness: float | None = None,
    ):
        if dim not in (1, 2):
            raise TargetError("perturbed_uniform supports d in {1, 2}")
        self.dim = dim
        self.q = int(q)
        if self.q < 1:
            raise TargetError("q must be >= 1")
        self.amps = np.asarray(amplitudes, dtype=float)
        self.centers = np.asarray(centers, dtype=float).reshape(len(self.amps), dim)
        self.widths = np.asarray(widths, dtype=float)
        if np.any(self.widths <= 0):
            raise TargetError("widths must be positive")
        if np.any(np.abs(self.centers) + self.widths[:, None] > 1.0):
            raise TargetError("bump support must stay inside the cube")
        # int_{-1}^{1} (1-u^2)^q du
        self._bump_mass = sum(
            math.comb(self.q, i) * (-1.0) ** i * 2.0 / (2 * i + 1) for i in range(self.q + 1)
        )
        self.norm = 2.0**dim + float(
            np.sum(self.amps * (self.widths * self._bump_mass) ** dim)
        )
        self.smoothness = float(smoothness) if smoothness is not None else float(q)
        self._check_positive()

    def _bump(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0
        out[inside] = (1.0 - u[inside] ** 2) ** self.q
        return out

    def _bump_cdf(self, u: np.ndarray) -> np.ndarray:
        u = np.clip(u, -1.0, 1.0)
        acc = np.zeros_like(u)
        for i in range(self.q + 1):
            acc += math.comb(self.q, i) * (-1.0) ** i * (u ** (2 * i + 1) + 1.0) / (2 * i + 1)
        return acc

    def _raw(self, pts: np.ndarray) -> np.ndarray:
        val = np.ones(pts.shape[0])
        for a, c, w in zip(self.amps, self.centers, self.widths):
            term = np.ones(pts.shape[0]) * a
            for i in range(self.dim):
                term = term * self._bump((pts[:, i] - c[i]) / w)
            val += term
        return val

    def _check_positive(self):
        if self.dim == 1:
            pts = np.linspace(-1.0, 1.0, 8193)[:, None]
        else:
            g = np.linspace(-1.0, 1.0, 257)
            xx, yy = np.meshgrid(g, g, indexing="ij")
            pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        vals = self._raw(pts) / self.norm
        lo, hi = float(vals.min()), float(vals.max())
        if lo <= 0:
            raise TargetError("perturbed uniform is not strictly positive")
        self.c0 = 1.01 * max(hi, 1.0 / lo)

    def pdf(self, x):
        pts, squeeze = _as_points(x, self.dim)
        val = self._clip_outside(pts, self._raw(pts) / self.norm)
        return float(val[0]) if squeeze else val

    def cdf(self, x):
        if self.dim != 1:
            return super().cdf(x)
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        acc = x + 1.0
        for a, c, w in zip(self.amps, self.centers[:, 0], self.widths):
            acc = acc + a * w * self._bump_cdf((x - c) / w)
        return acc / self.norm

    def quantile(self, u):
        if self.dim != 1:
            return super().quantile(u)
        return _bisect_quantile(self.cdf, np.asarray(u, dtype=float))

    def sample(self, seed, n):
        if n < 1:
            raise TargetError("n must be >= 1")
        rng = substream(seed, 0)
        if self.dim == 1:
            u_grid, q_grid = self.quantile_table()
            return np.interp(rng.random(n), u_grid, q_grid)[:, None]
        pmax = (1.0 + float(np.sum(np.clip(self.amps, 0.0, None)))) / self.norm
        out = np.empty((n, 2))
        got = 0
        drawn = 0
        while got < n:
            chunk = max(2 * (n - got), 1024)
            pts = rng.uniform(-1.0, 1.0, size=(chunk, 2))
            u = rng.random(chunk)
            keep = u < (self._raw(pts) / self.norm) / pmax
            take = min(int(keep.sum()), n - got)
            out[got : got + take] = pts[keep][:take]
            got += take
            drawn += chunk
            if drawn > 1e4 and got / drawn < 1e-4:
                raise RejectionError(f"acceptance rate {got/drawn:.2e} below 1e-4")
        return out

    def second_moment(self):
        gx, gw = leggauss(65)
        if self.dim == 1:
            return float(np.sum(gw * gx**2 * self.pdf(gx[:, None])))
        xx, yy = np.meshgrid(gx, gx, indexing="ij")
        ww = (gw[:, None] * gw[None, :]).ravel()
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        return float(np.sum(ww * (pts**2).sum(axis=1) * self.pdf(pts)))


# ---------------------------------------------------------------------------
# Factory (config sections)
# ---------------------------------------------------------------------------

DEFAULT_SPLINE_COEFFS = (0.0, 0.0, 0.9, -0.55, 0.85, 1.1, -0.35, 0.7, 0.45, 0.0, 0.0, 0.0, 0.0)


def make_target(kind: str, dim: int, **params) -> TargetDensity:
    kind = kind.strip().lower()
    if kind == "uniform":
        return Uniform(dim, smoothness=float(params.get("smoothness", 2.0)))
    if kind == "spline_mixture":
        level = int(params.get("level", 3))
        order = int(params.get("order", 3))
        n_b = 2 ** (level + 1) - order
        coeffs = params.get("coeffs")
        if coeffs is None:
            if dim == 1 and level == 3 and order == 3:
                coeffs = np.asarray(DEFAULT_SPLINE_COEFFS)
            else:
                gen = substream(int(params.get("coeff_seed", 7)), 99)
                shape = (n_b,) if dim == 1 else (n_b, n_b)
                coeffs = 0.8 * gen.uniform(-1.0, 1.0, size=shape)
                # zero the collar rows/cols so the boundary stays flat
                coeffs[..., :1] = 0.0
                coeffs[..., -1:] = 0.0
        return SplineMixture(
            dim,
            level,
            order,
            np.asarray(coeffs, dtype=float),
            base=float(params.get("base", 1.0)),
            smoothness=params.get("smoothness"),
        )
    if kind == "perturbed_uniform":
        amps = params.get("amplitudes", (0.5, -0.3))
        centers = params.get("centers")
        if centers is None:
            centers = [[-0.4] * dim, [0.45] * dim]
        widths = params.get("widths", (0.35, 0.3))
        return PerturbedUniform(
            dim,
            amps,
            centers,
            widths,
            q=int(params.get("q", 3)),
            smoothness=params.get("smoothness"),
        )
    raise TargetError(f"unknown target kind {kind!r}")
