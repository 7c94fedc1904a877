"""Cardinal and tensor-product B-spline machinery.

The cardinal basis function of order ell is the (ell+1)-fold self-convolution
of the unit indicator on [0, 1]; it is the degree-ell piecewise polynomial

    B_ell(x) = (1/ell!) * sum_{k=0}^{ell+1} (-1)^k C(ell+1, k) (x - k)_+^ell

supported on [0, ell+1].  Dilated/shifted tensor products of it form the
dictionary used both to build synthetic target densities and to measure how
fast least-squares approximations of smooth functions improve with the basis
budget.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss


class SplineError(ValueError):
    pass


class QuadratureError(RuntimeError):
    """Adaptive quadrature could not meet tolerance; carries the estimate."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def eval_cardinal(order: int, x) -> np.ndarray:
    """Cardinal B-spline of the given order, vectorized; zero outside [0, order+1]."""
    if order < 1:
        raise SplineError("order must be >= 1")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x > 0) & (x < order + 1)
    if np.any(inside):
        xi = x[inside]
        acc = np.zeros_like(xi)
        for k in range(order + 2):
            acc += (-1.0) ** k * math.comb(order + 1, k) * np.clip(xi - k, 0.0, None) ** order
        out[inside] = acc / math.factorial(order)
    return out


@dataclass(frozen=True)
class SplineBasisIndex:
    """Tensor basis member prod_i B_ell(2^{k_i} x_i - j_i)."""

    order: int
    level: tuple[int, ...]
    shift: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.level)

    @property
    def support(self) -> list[tuple[float, float]]:
        return [
            (2.0**-k * j, 2.0**-k * (j + self.order + 1))
            for k, j in zip(self.level, self.shift)
        ]

    @property
    def mass(self) -> float:
        """Integral over R^d: each 1D factor integrates to 2^-k."""
        return float(2.0 ** -sum(self.level))


def eval_tensor(idx: SplineBasisIndex, x) -> np.ndarray:
    """Evaluate the tensor basis member at points of shape (..., d)."""
    pts = np.asarray(x, dtype=float)
    squeeze = pts.ndim == 1
    if squeeze:
        pts = pts[None, :]
    if pts.shape[-1] != idx.dim:
        raise SplineError("point dimension does not match the index")
    val = np.ones(pts.shape[:-1])
    for i, (k, j) in enumerate(zip(idx.level, idx.shift)):
        val *= eval_cardinal(idx.order, 2.0**k * pts[..., i] - j)
    return val[0] if squeeze else val


# ---------------------------------------------------------------------------
# Least-squares fitting on [-1, 1]^d
# ---------------------------------------------------------------------------


def _level_shifts(order: int, k: int) -> np.ndarray:
    """Shifts whose support overlaps [-1, 1] at per-dim level k."""
    return np.arange(-(2**k) - order, 2**k)


def single_level_for_budget(budget: int, order: int, dim: int) -> int:
    """Finest per-dim level whose full tensor dictionary fits the budget."""
    k = 0
    while (2 ** (k + 2) + order) ** dim <= budget:
        k += 1
    if (2 ** (k + 1) + order) ** dim > budget:
        raise SplineError(f"budget N={budget} below the smallest level-0 dictionary")
    return k


def _gauss_grid_1d(k: int, nodes_per_panel: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on the 2^{k+1} knot panels of [-1, 1]."""
    gx, gw = leggauss(nodes_per_panel)
    edges = np.linspace(-1.0, 1.0, 2 ** (k + 1) + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    pts = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
    wts = (half[:, None] * gw[None, :]).ravel()
    return pts, wts


@dataclass
class SplineApproximant:
    """Finite expansion sum alpha * basis over a single-level-per-block dictionary."""

    order: int
    dim: int
    blocks: list[tuple[int, np.ndarray]]  # (level k, coeff array of shape (n1,)*dim)
    condition: float

    @property
    def basis_count(self) -> int:
        return sum(c.size for _, c in self.blocks)

    def indices(self) -> list[SplineBasisIndex]:
        out = []
        for k, coeffs in self.blocks:
            shifts = _level_shifts(self.order, k)
            for flat, _ in np.ndenumerate(coeffs):
                shift = tuple(int(shifts[i]) for i in flat)
                out.append(SplineBasisIndex(self.order, (k,) * self.dim, shift))
        return out

    def coefficients(self) -> np.ndarray:
        return np.concatenate([c.ravel() for _, c in self.blocks])

    def __call__(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        squeeze = pts.ndim == 0
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            # a flat array is a batch of scalars in 1D, a single point in 2D
            pts = pts[:, None] if self.dim == 1 else pts[None, :]
        val = np.zeros(pts.shape[0])
        for k, coeffs in self.blocks:
            shifts = _level_shifts(self.order, k)
            mats = [
                eval_cardinal(self.order, 2.0**k * pts[:, i, None] - shifts[None, :])
                for i in range(self.dim)
            ]
            if self.dim == 1:
                val += mats[0] @ coeffs
            else:
                val += np.einsum("pi,pj,ij->p", mats[0], mats[1], coeffs)
        return val[0] if squeeze else val


def fit(
    f: Callable[[np.ndarray], np.ndarray],
    budget: int,
    order: int = 3,
    dim: int = 1,
    levels: Literal["single", "pyramid"] | Sequence[int] = "single",
) -> SplineApproximant:
    """Least-squares projection of f onto a B-spline dictionary on [-1, 1]^d.

    `levels` picks the allocation: "single" uses the finest full level whose
    size fits the budget, "pyramid" stacks all levels 0..k, and an explicit
    sequence of levels is used as given.  The quadrature grid is knot-aligned
    Gauss-Legendre with at least 4 nodes per basis function per dimension.
    Warns if the normal equations are ill-conditioned (cond > 1e12).
    """
    if budget < 1:
        raise SplineError("budget must be >= 1")
    if dim not in (1, 2):
        raise SplineError("fitting supports d in {1, 2}")

    if levels == "single":
        level_list = [single_level_for_budget(budget, order, dim)]
    elif levels == "pyramid":
        kmax = 0
        while sum((2 ** (k + 1) + order) ** dim for k in range(kmax + 2)) <= budget:
            kmax += 1
        level_list = list(range(kmax + 1))
    else:
        level_list = sorted(int(k) for k in levels)

    kfine = max(level_list)
    n1 = 2 ** (kfine + 1) + order
    panels = 2 ** (kfine + 1)
    q = max(order + 2, math.ceil(4.0 * n1 / panels))
    pts1, wts1 = _gauss_grid_1d(kfine, q)

    if dim == 1:
        pts = pts1[:, None]
        wts = wts1
    else:
        gx, gy = np.meshgrid(pts1, pts1, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        wts = (wts1[:, None] * wts1[None, :]).ravel()

    cols = []
    shapes = []
    for k in level_list:
        shifts = _level_shifts(order, k)
        mats = [
            eval_cardinal(order, 2.0**k * pts[:, i, None] - shifts[None, :])
            for i in range(dim)
        ]
        if dim == 1:
            block = mats[0]
        else:
            block = (mats[0][:, :, None] * mats[1][:, None, :]).reshape(pts.shape[0], -1)
        cols.append(block)
        shapes.append((k, (shifts.size,) * dim))
    design = np.concatenate(cols, axis=1)

    sq = np.sqrt(wts)
    fx = np.asarray(f(pts if dim == 2 else pts[:, 0]), dtype=float)
    sol, _, rank, svals = np.linalg.lstsq(design * sq[:, None], fx * sq, rcond=None)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if cond > 1e12:
        warnings.warn(f"spline fit ill-conditioned (cond={cond:.3g})", RuntimeWarning)

    blocks = []
    pos = 0
    for k, shape in shapes:
        size = int(np.prod(shape))
        blocks.append((k, sol[pos : pos + size].reshape(shape)))
        pos += size
    return SplineApproximant(order=order, dim=dim, blocks=blocks, condition=cond)


def l2_error(
    f: Callable[[np.ndarray], np.ndarray],
    approx: SplineApproximant,
    refine: int = 1,
) -> float:
    """Quadrature L2 distance between f and the approximant on [-1, 1]^d."""
    kfine = max(k for k, _ in approx.blocks) + refine
    q = approx.order + 3
    pts1, wts1 = _gauss_grid_1d(kfine, q)
    if approx.dim == 1:
        resid = np.asarray(f(pts1), dtype=float) - approx(pts1[:, None])
        return float(np.sqrt(np.sum(wts1 * resid**2)))
    gx, gy = np.meshgrid(pts1, pts1, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    wts = (wts1[:, None] * wts1[None, :]).ravel()
    resid = np.asarray(f(pts), dtype=float) - approx(pts)
    return float(np.sqrt(np.sum(wts * resid**2)))


# ---------------------------------------------------------------------------
# Gaussian-smoothed basis integrals
# ---------------------------------------------------------------------------

_GL_LO = leggauss(7)
_GL_HI = leggauss(15)


def _panel_value(g: Callable[[np.ndarray], np.ndarray], a: float, b: float, rule) -> float:
    gx, gw = rule
    half = (b - a) / 2.0
    mid = (a + b) / 2.0
    return half * float(np.sum(gw * g(mid + half * gx)))


def _adaptive_integral(g: Callable[[np.ndarray], np.ndarray], a: float, b: float, tol: float) -> float:
    """Adaptive Gauss-Legendre by panel bisection (7 vs 15 point comparison)."""
    stack = [(a, b, tol, 0)]
    total = 0.0
    while stack:
        lo, hi, t, depth = stack.pop()
        coarse = _panel_value(g, lo, hi, _GL_LO)
        fine = _panel_value(g, lo, hi, _GL_HI)
        if abs(fine - coarse) <= t or depth >= 48:
            if abs(fine - coarse) > t:
                raise QuadratureError(
                    f"tolerance {t:.2e} not met on [{lo}, {hi}]", total + fine
                )
            total += fine
        else:
            midpt = (lo + hi) / 2.0
            stack.append((lo, midpt, t / 2.0, depth + 1))
            stack.append((midpt, hi, t / 2.0, depth + 1))
    return total


def smoothed_basis_integral(
    idx: SplineBasisIndex,
    kind: Literal["density", "whitened-moment", "mean-moment"],
    m: float,
    sigma: float,
    x,
    tol: float = 1e-10,
):
    """Integrals of the basis member against a scaled Gaussian kernel.

    With g(x; my, sigma^2) the isotropic Gaussian density in x,

        density:          int M(y) g(x; my, s^2) dy            (scalar)
        whitened-moment:  int (x - my)/sigma * M(y) g dy       (vector)
        mean-moment:      int y * M(y) g dy                    (vector)

    Everything factorizes across dimensions, so each component is a product
    of 1D panel-adaptive Gauss-Legendre integrals, each accurate to `tol`.
    """
    if sigma <= 0:
        raise SplineError("sigma must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (idx.dim,):
        raise SplineError(f"x must have shape ({idx.dim},)")

    norm = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)

    def factors(i: int) -> tuple[float, float, float]:
        k, j = idx.level[i], idx.shift[i]
        xi = x[i]

        def gauss(y):
            return norm * np.exp(-((xi - m * y) ** 2) / (2.0 * sigma**2))

        def base(y):
            return eval_cardinal(idx.order, 2.0**k * y - j)

        lo, hi = 2.0**-k * j, 2.0**-k * (j + idx.order + 1)
        knots = list(np.linspace(lo, hi, idx.order + 2))
        # pre-split at the kernel core: a spike much narrower than a panel can
        # hide between the nodes of both quadrature rules
        if m > 1e-12:
            center, width = xi / m, sigma / m
            for r in range(-8, 9):
                y = center + r * width
                if lo < y < hi:
                    knots.append(y)
        knots = sorted(set(knots))
        i0 = i1 = i2 = 0.0
        per_panel = tol / len(knots) / 4.0
        for a, b in zip(knots[:-1], knots[1:]):
            i0 += _adaptive_integral(lambda y: base(y) * gauss(y), a, b, per_panel)
            i1 += _adaptive_integral(
                lambda y: (xi - m * y) / sigma * base(y) * gauss(y), a, b, per_panel
            )
            i2 += _adaptive_integral(lambda y: y * base(y) * gauss(y), a, b, per_panel)
        return i0, i1, i2

    facs = [factors(i) for i in range(idx.dim)]
    dens = [f[0] for f in facs]
    if kind == "density":
        return float(np.prod(dens))
    if kind == "whitened-moment":
        col = 1
    elif kind == "mean-moment":
        col = 2
    else:
        raise SplineError(f"unknown kind {kind!r}")
    out = np.empty(idx.dim)
    for c in range(idx.dim):
        val = facs[c][col]
        for i in range(idx.dim):
            if i != c:
                val *= dens[i]
        out[c] = val
    return out


# ---------------------------------------------------------------------------
# Approximation-rate sweeps
# ---------------------------------------------------------------------------


@dataclass
class RateSweep:
    table: list[tuple[int, float]]  # (budget, L2 error)
    slope: float
    stderr: float
    floor: bool  # errors at the numerical floor; slope not meaningful
    s_label: float


def rate_sweep(
    f: Callable[[np.ndarray], np.ndarray],
    s_label: float,
    dim: int,
    budgets: Sequence[int],
    order: int = 3,
    levels: Literal["single", "pyramid"] = "single",
) -> RateSweep:
    """Fit f at increasing budgets and report the log-log error slope."""
    budgets = list(budgets)
    if len(budgets) < 3 or any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise SplineError("need at least 3 strictly increasing budgets")
    table = []
    for budget in budgets:
        approx = fit(f, budget, order=order, dim=dim, levels=levels)
        err = max(l2_error(f, approx), 1e-300)
        table.append((budget, err))
    floor = all(err < 1e-8 for _, err in table)
    logn = np.log([float(b) for b, _ in table])
    loge = np.log([err for _, err in table])
    a = np.stack([logn, np.ones_like(logn)], axis=1)
    sol, res, _, _ = np.linalg.lstsq(a, loge, rcond=None)
    dof = max(len(table) - 2, 1)
    ssr = float(res[0]) if res.size else float(np.sum((loge - a @ sol) ** 2))
    sxx = float(np.sum((logn - logn.mean()) ** 2))
    stderr = math.sqrt(ssr / dof / sxx) if sxx > 0 else math.inf
    return RateSweep(table=table, slope=float(sol[0]), stderr=stderr, floor=floor, s_label=s_label)


def write_rate_csv(path, sweep: RateSweep) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "l2_error", "slope", "stderr", "floor", "s_label"])
        for budget, err in sweep.table:
            writer.writerow([budget, repr(err), repr(sweep.slope), repr(sweep.stderr), int(sweep.floor), repr(sweep.s_label)])
