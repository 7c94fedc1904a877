"""Experiment driver: sweep (schedule, n, seed) cells, measure Wasserstein
distance of generated samples to the target, fit log-log slopes, and emit
machine-readable results.

Determinism contract: every cell derives all of its randomness from
(base_seed + seed_offset) and its own coordinates, cells execute in worker
processes with single-threaded BLAS, and output rows are written in a fixed
order, so results.csv is byte-identical across reruns and across any
parallelism degree.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import theory
from .cfm import EmpiricalOracle
from .config import ExperimentConfig
from .ode import FlowConfig, push_samples
from .partition import (
    ModelConfig,
    PartitionCaps,
    TimePartition,
    build_partition,
    train_partitioned,
)
from .schedules import Schedule
from .seeding import substream
from .targets import TargetDensity
from .velocity_net import TrainConfig
from .wasserstein import EXACT_SIZE_CAP, EmpiricalMeasure, w_p_1d, w_p_exact

CSV_HEADER = ["target", "schedule", "kappa", "n", "seed", "p", "w_value", "t0", "mode"]


class HarnessError(RuntimeError):
    pass


def fit_slope(points) -> tuple[float, float]:
    """OLS slope and standard error of log(value) on log(n)."""
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 3:
        raise HarnessError("need at least 3 points to fit a slope")
    if any(v <= 0 for _, v in pts):
        raise HarnessError("values must be positive for a log-log fit")
    logn = np.log([n for n, _ in pts])
    logv = np.log([v for _, v in pts])
    if np.ptp(logn) == 0:
        raise HarnessError("degenerate fit: all n equal")
    a = np.stack([logn, np.ones_like(logn)], axis=1)
    sol, res, _, _ = np.linalg.lstsq(a, logv, rcond=None)
    dof = max(len(pts) - 2, 1)
    ssr = float(res[0]) if res.size else float(np.sum((logv - a @ sol) ** 2))
    sxx = float(np.sum((logn - logn.mean()) ** 2))
    return float(sol[0]), math.sqrt(ssr / dof / sxx)


# ---------------------------------------------------------------------------
# Per-cell measurement
# ---------------------------------------------------------------------------

_QUANTILE_CACHE: dict[str, tuple[np.ndarray, np.ndarray]] = {}


def _target_cache_key(cfg: ExperimentConfig) -> str:
    return json.dumps(
        [cfg.target_kind, cfg.target_dim, sorted(cfg.target_params.items(), key=str)],
        sort_keys=True,
        default=str,
    )


def _quantile_table(cfg: ExperimentConfig, target: TargetDensity) -> tuple[np.ndarray, np.ndarray]:
    key = _target_cache_key(cfg)
    if key not in _QUANTILE_CACHE:
        _QUANTILE_CACHE[key] = target.quantile_table()
    return _QUANTILE_CACHE[key]


def w_p_to_quantile(samples: np.ndarray, quantile_fn, p: float, nodes: int = 8) -> float:
    """W_p between an empirical sample and a distribution given by its quantile
    function: integrate |x_(i) - Q(u)|^p over each rank slab with Gauss-Legendre."""
    xs = np.sort(np.asarray(samples, dtype=float).ravel())
    m = xs.size
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    lo = np.arange(m) / m
    u = lo[:, None] + (gx[None, :] + 1.0) / (2.0 * m)
    w = gw[None, :] / (2.0 * m)
    q = quantile_fn(u.ravel()).reshape(u.shape)
    cost = float(np.sum(w * np.abs(xs[:, None] - q) ** p))
    return cost ** (1.0 / p)


def _schedule_r0(schedule: Schedule, s: float) -> float:
    return (s + 1.0) / min(schedule.kappa, schedule.kappatilde)


def _cell_partition(cfg: ExperimentConfig, schedule: Schedule, n: int, s: float) -> TimePartition:
    caps = PartitionCaps(t0_min=cfg.t0_min, k_max=cfg.k_max)
    r0 = _schedule_r0(schedule, s)
    if cfg.t0_mode == "fixed":
        t0_fixed = cfg.t0
    elif cfg.t0_mode == "theory-smooth":
        t0_fixed = float(n ** (-r0 * cfg.target_dim / (2.0 * s + cfg.target_dim)))
    else:
        t0_fixed = None
    part = build_partition(
        n, s, cfg.target_dim, schedule.kappa, cfg.delta, r0,
        caps=caps, kappatilde=schedule.kappatilde,
        t0_fixed=t0_fixed,
    )
    if cfg.mode == "single":
        part.knots = np.asarray([part.t0, 1.0])
        part.basis_counts = [part.basis_budget]
        part.j_star = 1
        part.flags = list(part.flags) + ["single_interval"]
    return part


@dataclass
class CellResult:
    key: tuple
    rows: list[list]
    net_stats: dict | None
    partition_json: str
    error: str | None


def _measure(cfg: ExperimentConfig, target: TargetDensity, gen: np.ndarray, n: int, seed_idx: int):
    values = {}
    if cfg.estimator == "quantile-true":
        u_grid, q_grid = _quantile_table(cfg, target)
        qfn = lambda u: np.interp(u, u_grid, q_grid)
        for p in cfg.eval_p:
            values[p] = w_p_to_quantile(gen[:, 0], qfn, p)
        return values
    ref_seed = cfg.base_seed
    ref = target.sample(_key_seed(ref_seed, 3, n, seed_idx), cfg.n_ref)
    if cfg.target_dim == 1:
        for p in cfg.eval_p:
            values[p] = w_p_1d(EmpiricalMeasure(gen), EmpiricalMeasure(ref), p)
        return values
    size = min(gen.shape[0], ref.shape[0], EXACT_SIZE_CAP)
    rng = substream(_key_seed(ref_seed, 4, n, seed_idx), 0)
    gen_idx = rng.choice(gen.shape[0], size, replace=False)
    ref_idx = rng.choice(ref.shape[0], size, replace=False)
    for p in cfg.eval_p:
        values[p] = w_p_exact(EmpiricalMeasure(gen[gen_idx]), EmpiricalMeasure(ref[ref_idx]), p)
    return values


def _key_seed(base: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=base, spawn_key=tuple(key)).generate_state(1)[0])


def run_cell(cfg_dict: dict, sched_idx: int, schedule_name: str, n: int, seed_idx: int, seed_offset: int) -> CellResult:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    key = (schedule_name, n, seed_idx)
    try:
        base = cfg.base_seed + seed_offset
        target = cfg.build_target()
        schedule = cfg.build_schedules()[schedule_name]
        s = target.smoothness
        data = target.sample(_key_seed(base, 0, n, seed_idx), n)
        part = _cell_partition(cfg, schedule, n, s)

        flow_steps = max(cfg.ode_steps_per_interval * part.n_intervals, 32)
        flow_cfg = FlowConfig(
            method="rk4",
            steps=flow_steps,
            spacing="schedule",
            t_end=part.t0,
            breakpoints=tuple(float(t) for t in part.knots[1:-1]),
            schedule=schedule,
        )
        gen_seed = _key_seed(base, 2, sched_idx, n, seed_idx)
        net_stats = None

        if cfg.pipeline == "train":
            steps = int(round(cfg.train_steps * (n / min(cfg.n_grid)) ** cfg.train_steps_growth))
            model_cfg = ModelConfig(
                hidden_layers=cfg.hidden_layers,
                width_scale=cfg.width_scale,
                clamp_d=cfg.clamp_d,
                train=TrainConfig(
                    steps=steps,
                    batch=cfg.train_batch,
                    lr=cfg.train_lr,
                    beta1=cfg.train_beta1,
                    beta2=cfg.train_beta2,
                ),
            )
            field, _ = train_partitioned(
                data, schedule, part, model_cfg, seed=_key_seed(base, 1, sched_idx, n, seed_idx)
            )
            net_stats = {
                "total_params": int(sum(net.parameter_count() for net in field.nets)),
                "layers": int(cfg.hidden_layers + 1),
                "max_width": int(max(max(net.hidden) for net in field.nets)),
                "max_weight": float(max(net.max_weight_magnitude() for net in field.nets)),
                "intervals": part.n_intervals,
            }
            gen = push_samples(field, gen_seed, cfg.n_gen, flow_cfg, dim=cfg.target_dim)
        elif cfg.pipeline == "oracle":
            oracle = EmpiricalOracle(data, schedule)
            gen = push_samples(oracle.velocity, gen_seed, cfg.n_gen, flow_cfg, dim=cfg.target_dim)
        else:  # kde endpoint: smooth the data directly at the stopping time
            oracle = EmpiricalOracle(data, schedule)
            gen = oracle.sample_mixture(part.t0, cfg.n_gen, substream(gen_seed, 0))

        values = _measure(cfg, target, gen, n, seed_idx)
        mode = f"{cfg.pipeline}-{cfg.mode}-{cfg.t0_mode}"
        rows = [
            [
                cfg.target_kind,
                schedule_name,
                repr(schedule.kappa),
                n,
                seed_idx,
                repr(float(p)),
                repr(float(values[p])),
                repr(float(part.t0)),
                mode,
            ]
            for p in cfg.eval_p
        ]
        return CellResult(key, rows, net_stats, part.to_json(), None)
    except Exception:
        return CellResult(key, [], None, "", traceback.format_exc())


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------


def run(cfg: ExperimentConfig, out_dir, parallel: int = 1, seed_offset: int = 0) -> dict:
    """Execute the sweep, write results.csv / run_meta.json / report, and
    return a summary with the failed-cell fraction."""
    problems = cfg.validate()
    if problems:
        raise HarnessError("invalid config: " + "; ".join(problems))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cells = []
    for sched_idx, name in enumerate(cfg.schedules):
        for n in cfg.n_grid:
            for seed_idx in range(cfg.n_seeds):
                cells.append((sched_idx, name, n, seed_idx))

    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    cfg_dict = cfg.to_dict()
    args = [(cfg_dict, si, nm, n, sd, seed_offset) for si, nm, n, sd in cells]
    # fork keeps worker state identical across parallelism degrees
    ctx = get_context("fork")
    results: list[CellResult] = []
    with ProcessPoolExecutor(max_workers=max(parallel, 1), mp_context=ctx) as pool:
        for res in pool.map(_run_cell_star, args, chunksize=1):
            results.append(res)

    rows = []
    failures = {}
    net_stats = {}
    partitions = {}
    for res in results:
        if res.error is not None:
            failures["/".join(str(k) for k in res.key)] = res.error
        else:
            rows.extend(res.rows)
            if res.net_stats:
                net_stats["/".join(str(k) for k in res.key)] = res.net_stats
            partitions["/".join(str(k) for k in res.key)] = json.loads(res.partition_json)

    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)

    meta = {
        "config": cfg_dict,
        "seed_offset": seed_offset,
        "failures": failures,
        "net_stats": net_stats,
        "partitions": partitions,
    }
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)

    summary = report(out)
    summary["failed_fraction"] = len(failures) / max(len(cells), 1)
    return summary


def _run_cell_star(packed) -> CellResult:
    return run_cell(*packed)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def report(out_dir) -> dict:
    """Aggregate results.csv into report.json plus gnuplot-ready plot data.

    Slopes are fitted on seed-averaged values per (schedule, p); each slope row
    carries the matching theory exponent with a consistency flag at +/-0.15
    (comparisons are modulo poly(log n) factors which the exponents omit).
    """
    out = Path(out_dir)
    meta = json.loads((out / "run_meta.json").read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    target = cfg.build_target()
    schedules = cfg.build_schedules()

    cells: list[dict] = []
    with open(out / "results.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cells.append(
                {
                    "target": row["target"],
                    "schedule": row["schedule"],
                    "kappa": float(row["kappa"]),
                    "n": int(row["n"]),
                    "seed": int(row["seed"]),
                    "p": float(row["p"]),
                    "w_value": float(row["w_value"]),
                    "t0": float(row["t0"]),
                    "mode": row["mode"],
                }
            )

    expected = {
        (name, n, sd, p)
        for name in schedules
        for n in cfg.n_grid
        for sd in range(cfg.n_seeds)
        for p in cfg.eval_p
    }
    present = {(c["schedule"], c["n"], c["seed"], c["p"]) for c in cells}
    missing = sorted(expected - present)

    slope_rows = []
    plots = {}
    for name, schedule in schedules.items():
        for p in cfg.eval_p:
            sub = [c for c in cells if c["schedule"] == name and c["p"] == p]
            by_n = {}
            for c in sub:
                by_n.setdefault(c["n"], []).append(c["w_value"])
            points = [(n, float(np.mean(v))) for n, v in sorted(by_n.items())]
            if len(points) < 3:
                continue
            slope, stderr = fit_slope(points)
            ctx = theory.RateContext(
                s=target.smoothness, d=cfg.target_dim, kappa=schedule.kappa, delta=0.0,
                n=max(cfg.n_grid),
            )
            exponent = theory.upper_rate_exponent(ctx)
            gap = slope + exponent  # slope should be about -exponent
            flag = "consistent" if abs(gap) <= 0.15 else ("shallower" if gap > 0 else "steeper")
            slope_rows.append(
                {
                    "schedule": name,
                    "p": p,
                    "slope": slope,
                    "stderr": stderr,
                    "theory_exponent": exponent,
                    "flag": flag,
                    "points": points,
                    "note": "comparison modulo poly(log n)",
                }
            )
            plots[f"{name}_p{p:g}"] = points

    theory_block = {"per_schedule": {}}
    v2 = target.second_moment()
    for name, schedule in schedules.items():
        ctx = theory.RateContext(
            s=target.smoothness, d=cfg.target_dim, kappa=schedule.kappa, delta=0.0,
            n=max(cfg.n_grid),
        )
        t0_by_n = {}
        for n in cfg.n_grid:
            part = _cell_partition(cfg, schedule, n, target.smoothness)
            t0_by_n[str(n)] = {"t0": part.t0, "theta_n": theory.theta_n(schedule, part.t0, v2, cfg.target_dim)}
        theory_block["per_schedule"][name] = {
            "kappa": schedule.kappa,
            "upper_rate_exponent": theory.upper_rate_exponent(ctx),
            "kde_exponent": theory.kde_exponent(cfg.target_dim),
            "stopping": t0_by_n,
        }
    theory_block["minimax_lower_exponent"] = (
        theory.minimax_lower_exponent(target.smoothness, cfg.target_dim)
        if cfg.target_dim >= 2
        else None
    )
    theory_block["basis_budget"] = {
        str(n): theory.n_to_basis_count(n, target.smoothness, cfg.target_dim) for n in cfg.n_grid
    }
    net_stats = meta.get("net_stats", {})
    if net_stats:
        first = net_stats[sorted(net_stats)[0]]
        theory_block["covering_log_bound"] = theory.covering_log_bound(
            S=first["total_params"],
            L=first["layers"],
            wmax=first["max_width"],
            B=max(first["max_weight"], 1.0),
            eps=1.0 / max(cfg.n_grid),
            n=max(cfg.n_grid),
        )

    rep = {
        "name": cfg.name,
        "theory": theory_block,
        "cells": cells,
        "missing_cells": [list(m) + [meta["failures"].get("/".join(str(x) for x in m[:3]), "missing")] for m in missing],
        "slopes": slope_rows,
        "note": "empirical slopes are compared to poly-log-free exponents",
    }
    with open(out / "report.json", "w") as fh:
        json.dump(rep, fh, sort_keys=True, indent=2)

    plots_dir = out / "plots"
    plots_dir.mkdir(exist_ok=True)
    for label, points in plots.items():
        with open(plots_dir / f"{label}.dat", "w") as fh:
            fh.write(f"# n  w_mean ({label})\n")
            for n, v in points:
                fh.write(f"{n} {v!r}\n")

    return {"slopes": slope_rows, "n_cells": len(cells), "missing": missing}
