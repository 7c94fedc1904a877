"""Dyadic time partitions and per-interval training.

The interval [t0, 1] is split at doubling knots t_j = 2 t_{j-1}; one network
is trained per interval, with a per-interval basis budget that shrinks for
later intervals:

    N'_j = N                                   for intervals up to the switch knot
    N'_j = ceil(t_{j-1}^(-d*kappa) * N^(delta*kappa))  (capped at N) beyond it.

The switch knot sits near T_* = N^{-(1/kappa - delta)/d}, the time below
which the smoothing width no longer covers the boundary collar of the target.
The factor-2 spacing keeps the per-interval Gronwall factor exp(int c/u du)
equal to 2^c, a constant, which is what makes the stitched bound sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .schedules import Schedule
from .theory import n_to_basis_count
from .velocity_net import TrainConfig, VelocityNet, train_velocity_net, width_for_basis_count
from .seeding import substream


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionCaps:
    t0_min: float = 1e-4
    k_max: int = 60


@dataclass
class TimePartition:
    t0: float
    knots: np.ndarray  # t0 = knots[0] < ... < knots[K] = 1
    j_star: int  # knot index near the error-regime switch
    basis_counts: list[int]  # N'_j for interval j = 1..K
    basis_budget: int  # N
    r0: float
    kappa: float
    delta: float
    d: int
    t_star: float
    flags: list[str] = field(default_factory=list)

    @property
    def n_intervals(self) -> int:
        return len(self.knots) - 1

    def interval(self, j: int) -> tuple[float, float]:
        """Closed interval [t_{j-1}, t_j] for j in 1..K."""
        return float(self.knots[j - 1]), float(self.knots[j])

    def gronwall_factor(self, c_tilde: float, j: int) -> float:
        """exp(int_{t_{j-1}}^{t_j} c/u du) = (t_j / t_{j-1})^c, constant 2^c inside."""
        lo, hi = self.interval(j)
        return (hi / lo) ** c_tilde

    def to_json(self) -> str:
        return json.dumps(
            {
                "t0": self.t0,
                "knots": [float(t) for t in self.knots],
                "j_star": self.j_star,
                "basis_counts": self.basis_counts,
                "basis_budget": self.basis_budget,
                "r0": self.r0,
                "kappa": self.kappa,
                "delta": self.delta,
                "d": self.d,
                "t_star": self.t_star,
                "flags": self.flags,
            },
            sort_keys=True,
        )


def t_star_balance(n: int, s: float, d: int, kappa: float, delta: float) -> float:
    """Switch time t_* = n^{-(1/kappa - delta)/(2s + d)} balancing the two
    dominant error terms of the stitched bound (unit constant)."""
    if n < 2 or s <= 0 or d < 1 or kappa < 0.5:
        raise PartitionError("invalid parameters")
    return float(n ** (-(1.0 / kappa - delta) / (2.0 * s + d)))


def build_partition(
    n: int,
    s: float,
    d: int,
    kappa: float,
    delta: float,
    r0: float,
    caps: PartitionCaps = PartitionCaps(),
    kappatilde: float | None = None,
    theory_faithful: bool = False,
    t0_fixed: float | None = None,
) -> TimePartition:
    """Dyadic partition with per-interval basis budgets for sample size n.

    t0 = N^(-r0) floored at caps.t0_min (flagged when clipped), unless
    t0_fixed pins it outright.  In theory-faithful mode r0 below
    (s+1)/min(kappa, kappatilde) is an error, since then the stopping gap is
    no longer negligible at the target rate.
    """
    if n < 2 or s <= 0 or d < 1:
        raise PartitionError("need n >= 2, s > 0, d >= 1")
    if kappa < 0.5:
        raise PartitionError("kappa must be >= 1/2")
    if not 0.0 <= delta < 1.0 / kappa:
        raise PartitionError("need 0 <= delta < 1/kappa")
    kt = kappa if kappatilde is None else kappatilde
    r0_floor = (s + 1.0) / min(kappa, kt)
    if theory_faithful and r0 < r0_floor - 1e-12:
        raise PartitionError(f"r0={r0} below the stopping-rate floor {r0_floor:.4g}")

    flags: list[str] = []
    basis_budget = n_to_basis_count(n, s, d)
    if t0_fixed is not None:
        if not 0.0 < t0_fixed < 1.0:
            raise PartitionError("t0_fixed must be in (0, 1)")
        t0 = float(t0_fixed)
        flags.append("t0_fixed")
    else:
        t0 = float(basis_budget**-r0)
    if t0 < caps.t0_min:
        t0 = caps.t0_min
        flags.append("t0_clipped")
    if math.ceil(math.log2(1.0 / t0)) > caps.k_max:
        t0 = 2.0**-caps.k_max
        flags.append("k_max_clipped")
    if t0 >= 1.0:
        t0 = 0.5
        flags.append("t0_degenerate")

    knots = [t0]
    while 2.0 * knots[-1] < 1.0:
        knots.append(2.0 * knots[-1])
    knots.append(1.0)
    knots = np.asarray(knots)

    t_star = float(basis_budget ** (-(1.0 / kappa - delta) / d))
    j_star = int(np.searchsorted(knots, t_star, side="left"))
    j_star = min(j_star, len(knots) - 1)
    if not t_star <= knots[j_star] <= 3.0 * t_star:
        flags.append("j_star_off_window")

    counts = []
    for j in range(1, len(knots)):
        if j <= j_star:
            counts.append(basis_budget)
        else:
            raw = math.ceil(knots[j - 1] ** (-d * kappa) * basis_budget ** (delta * kappa))
            counts.append(min(raw, basis_budget))

    return TimePartition(
        t0=t0,
        knots=knots,
        j_star=j_star,
        basis_counts=counts,
        basis_budget=basis_budget,
        r0=r0,
        kappa=kappa,
        delta=delta,
        d=d,
        t_star=t_star,
        flags=flags,
    )


class PiecewiseVelocityField:
    """Stitched field dispatching on t over half-open intervals.

    [t_{j-1}, t_j) belongs to interval j; the last interval is closed at 1.
    """

    def __init__(self, knots: np.ndarray, nets: list[VelocityNet]):
        if len(nets) != len(knots) - 1:
            raise PartitionError("one net per interval required")
        self.knots = np.asarray(knots, dtype=float)
        self.nets = nets

    def interval_of(self, t) -> np.ndarray:
        idx = np.searchsorted(self.knots, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.nets) - 1)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        if np.ndim(t) == 0:
            out = self.nets[int(self.interval_of(t))].forward(pts, t)
        else:
            t_arr = np.asarray(t, dtype=float)
            idx = self.interval_of(t_arr)
            out = np.empty_like(pts)
            for j in np.unique(idx):
                sel = idx == j
                out[sel] = self.nets[int(j)].forward(pts[sel], t_arr[sel])
        return out[0] if squeeze else out


@dataclass
class ModelConfig:
    hidden_layers: int = 3
    width_scale: float = 8.0
    clamp_d: float = 5.0
    train: TrainConfig = field(default_factory=TrainConfig)


def train_partitioned(
    data: np.ndarray,
    schedule: Schedule,
    partition: TimePartition,
    model_cfg: ModelConfig,
    seed: int,
) -> tuple[PiecewiseVelocityField, list]:
    """One network per interval, each trained on the full data restricted to
    its time range; widths follow the interval's basis budget.  Interval j
    trains on the seed substream (seed, j), so results do not depend on
    training order and a one-interval partition reproduces a direct run.
    """
    pts = np.asarray(data, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    dim = pts.shape[1]
    nets = []
    traces = []
    for j in range(1, partition.n_intervals + 1):
        t_lo, t_hi = partition.interval(j)
        width = width_for_basis_count(partition.basis_counts[j - 1], model_cfg.width_scale)
        net = VelocityNet(
            dim,
            (width,) * model_cfg.hidden_layers,
            schedule,
            clamp_d=model_cfg.clamp_d,
            n_train=pts.shape[0],
            seed=_interval_seed(seed, j, 0),
        )
        trace = train_velocity_net(
            net, pts, schedule, t_lo, t_hi, model_cfg.train, rng=substream(seed, j, 1)
        )
        nets.append(net)
        traces.append(trace)
    return PiecewiseVelocityField(partition.knots, nets), traces


def _interval_seed(seed: int, j: int, slot: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(j, slot)).generate_state(1)[0])
