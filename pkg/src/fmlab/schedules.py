"""Mean/variance schedules for conditional Gaussian paths, in reverse time.

A schedule is the coefficient pair (sigma_t, m_t) of the conditional law
N(m_t * x1, sigma_t^2 * I) that interpolates between the data (t = 0) and the
standard normal (t = 1).  All derivatives are with respect to reverse time t,
so sigma is nondecreasing and m is nonincreasing.

Three families are provided:

* affine:               sigma_t = t,        m_t = 1 - t
* variance preserving:  sigma_t = sqrt(t),  m_t = sqrt(1 - t)
* power law:            sigma_t = b0 * t^kappa,  1 - m_t = btilde0 * t^kappatilde

The small-t exponent kappa of sigma controls the attainable convergence rate;
kappa < 1/2 is rejected because the energy integral of sigma' over (0, 1]
diverges too fast for the complexity bounds the lab is built to probe.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

_T_CLIP = 1.0 - 1e-12  # m' of the variance-preserving family blows up at t=1


class ScheduleError(ValueError):
    """Invalid schedule parameters or evaluation outside (0, 1]."""


class Family(enum.Enum):
    AFFINE = "affine"
    VARIANCE_PRESERVING = "variance_preserving"
    POWER_LAW = "power_law"


class ScheduleValues(NamedTuple):
    sigma: float
    m: float
    dsigma: float
    dm: float


@dataclass(frozen=True)
class Schedule:
    """One member of the schedule family.

    b0, kappa, btilde0, kappatilde are only free for the power-law family;
    for the other two they are fixed by the analytic form and stored for
    introspection (rate formulas and stopping-time rules read them).
    """

    family: Family
    b0: float = 1.0
    kappa: float = 1.0
    btilde0: float = 1.0
    kappatilde: float = 1.0

    def __post_init__(self):
        if self.family is Family.AFFINE:
            object.__setattr__(self, "b0", 1.0)
            object.__setattr__(self, "kappa", 1.0)
            object.__setattr__(self, "btilde0", 1.0)
            object.__setattr__(self, "kappatilde", 1.0)
        elif self.family is Family.VARIANCE_PRESERVING:
            object.__setattr__(self, "b0", 1.0)
            object.__setattr__(self, "kappa", 0.5)
            # 1 - sqrt(1-t) = t/2 + O(t^2)
            object.__setattr__(self, "btilde0", 0.5)
            object.__setattr__(self, "kappatilde", 1.0)
        else:
            if self.kappa < 0.5:
                raise ScheduleError(
                    f"kappa={self.kappa} below 1/2: sigma' is not square "
                    "integrable near t=0 at the stopping times of interest"
                )
            if self.b0 <= 0 or self.btilde0 <= 0:
                raise ScheduleError("b0 and btilde0 must be positive")
            if self.btilde0 > 1:
                raise ScheduleError("btilde0 > 1 makes m_1 negative")
            if self.kappatilde <= 0:
                raise ScheduleError("kappatilde must be positive")

    def eval(self, t: float) -> ScheduleValues:
        """(sigma, m, sigma', m') at reverse time t in (0, 1]."""
        if not 0.0 < t <= 1.0:
            raise ScheduleError(f"t={t} outside (0, 1]")
        if self.family is Family.AFFINE:
            return ScheduleValues(t, 1.0 - t, 1.0, -1.0)
        if self.family is Family.VARIANCE_PRESERVING:
            tm = min(t, _T_CLIP)
            return ScheduleValues(
                math.sqrt(t),
                math.sqrt(1.0 - tm),
                0.5 / math.sqrt(t),
                -0.5 / math.sqrt(1.0 - tm),
            )
        sigma = self.b0 * t**self.kappa
        m = 1.0 - self.btilde0 * t**self.kappatilde
        dsigma = self.b0 * self.kappa * t ** (self.kappa - 1.0)
        dm = -self.btilde0 * self.kappatilde * t ** (self.kappatilde - 1.0)
        return ScheduleValues(sigma, m, dsigma, dm)

    def eval_arrays(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized eval over an array of times."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0) or np.any(t > 1.0):
            raise ScheduleError("times outside (0, 1]")
        if self.family is Family.AFFINE:
            one = np.ones_like(t)
            return t, 1.0 - t, one, -one
        if self.family is Family.VARIANCE_PRESERVING:
            tm = np.minimum(t, _T_CLIP)
            return (
                np.sqrt(t),
                np.sqrt(1.0 - tm),
                0.5 / np.sqrt(t),
                -0.5 / np.sqrt(1.0 - tm),
            )
        sigma = self.b0 * t**self.kappa
        m = 1.0 - self.btilde0 * t**self.kappatilde
        dsigma = self.b0 * self.kappa * t ** (self.kappa - 1.0)
        dm = -self.btilde0 * self.kappatilde * t ** (self.kappatilde - 1.0)
        return sigma, m, dsigma, dm

    def to_config(self) -> dict[str, str]:
        return {
            "family": self.family.value,
            "b0": repr(self.b0),
            "kappa": repr(self.kappa),
            "btilde0": repr(self.btilde0),
            "kappatilde": repr(self.kappatilde),
        }

    @staticmethod
    def from_config(section: dict) -> "Schedule":
        fam = Family(section["family"].strip().lower())
        if fam is Family.POWER_LAW:
            return Schedule(
                fam,
                b0=float(section.get("b0", 1.0)),
                kappa=float(section.get("kappa", 1.0)),
                btilde0=float(section.get("btilde0", 1.0)),
                kappatilde=float(section.get("kappatilde", 1.0)),
            )
        return Schedule(fam)


def affine() -> Schedule:
    return Schedule(Family.AFFINE)


def variance_preserving() -> Schedule:
    return Schedule(Family.VARIANCE_PRESERVING)


def power_law(b0: float, kappa: float, btilde0: float, kappatilde: float) -> Schedule:
    return Schedule(Family.POWER_LAW, b0=b0, kappa=kappa, btilde0=btilde0, kappatilde=kappatilde)


def kappa_of(schedule: Schedule) -> float:
    """Small-t exponent of sigma: 1 for affine, 1/2 for variance preserving."""
    return schedule.kappa


def kappatilde_of(schedule: Schedule) -> float:
    """Small-t exponent of 1 - m."""
    return schedule.kappatilde


@dataclass
class ValidationReport:
    d0: float
    max_deriv_sum: float
    energy_integral: float  # trapezoid of (sigma')^2 + (m')^2 over the grid
    sigma_monotone: bool
    m_monotone: bool
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(schedule: Schedule, grid: Sequence[float]) -> ValidationReport:
    """Check the schedule's structural properties numerically on a grid.

    Reports the tightest power-sandwich constant D0 with
    D0^-1 <= sigma^2 + m^2 <= D0, the largest |sigma'| + |m'| seen, and the
    grid integral of (sigma')^2 + (m')^2 (the energy that complexity bounds
    consume).  Violations are collected, never raised.
    """
    t = np.sort(np.asarray(list(grid), dtype=float))
    if t.size == 0:
        raise ScheduleError("empty validation grid")
    sigma, m, dsigma, dm = schedule.eval_arrays(t)
    power = sigma**2 + m**2
    d0 = float(max(power.max(), 1.0 / power.min()))
    deriv_sum = np.abs(dsigma) + np.abs(dm)
    energy = float(np.trapezoid(dsigma**2 + dm**2, t)) if t.size > 1 else 0.0

    violations: list[str] = []
    sig_mono = bool(np.all(np.diff(sigma) >= -1e-12))
    m_mono = bool(np.all(np.diff(m) <= 1e-12))
    if not sig_mono:
        violations.append("sigma not nondecreasing in t")
    if not m_mono:
        violations.append("m not nonincreasing in t")
    if np.any(sigma <= 0):
        violations.append("sigma not strictly positive")
    if np.any((m <= 0) & (t < 1.0)) or np.any(m > 1.0 + 1e-12):
        violations.append("m outside (0, 1] on the interior")
    if schedule.family in (Family.AFFINE, Family.VARIANCE_PRESERVING):
        s1 = schedule.eval(1.0).sigma
        if not 0.99 <= s1 <= 1.01:
            violations.append(f"sigma_1={s1} not within 1% of 1")
    if not np.all(np.isfinite(deriv_sum)):
        violations.append("non-finite derivative on grid")

    return ValidationReport(
        d0=d0,
        max_deriv_sum=float(deriv_sum.max()),
        energy_integral=energy,
        sigma_monotone=sig_mono,
        m_monotone=m_mono,
        violations=violations,
    )
