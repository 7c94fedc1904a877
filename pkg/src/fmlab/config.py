"""Experiment configuration: a flat INI-style sectioned text format.

Grammar (configparser dialect, UTF-8):

    [experiment]
    name      = rate-1d
    pipeline  = train          ; train | oracle | kde
    mode      = dyadic         ; single | dyadic
    t0_mode   = theory         ; fixed | theory
    t0        = 1e-3           ; used when t0_mode = fixed
    t0_min    = 1e-6
    delta     = 0.05
    n_grid    = 128 256 512 1024 2048 4096
    n_seeds   = 5
    base_seed = 2025

    [target]
    kind = spline_mixture      ; uniform | spline_mixture | perturbed_uniform
    dim  = 1
    ...kind-specific keys (level, order, coeffs, base, smoothness, q, ...)

    [schedule.NAME]            ; one section per schedule in the sweep
    family = variance_preserving
    ...power-law keys: b0, kappa, btilde0, kappatilde

    [train]
    steps / batch / lr / beta1 / beta2 / width_scale / hidden_layers / clamp_d

    [eval]
    p = 1 2                    ; Wasserstein orders to report
    estimator = quantile-true  ; quantile-true | reference | exact
    n_gen = 16384
    n_ref = 8192
    ode_steps_per_interval = 16

    [output]
    dir = out
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, asdict

from .schedules import Schedule
from .targets import make_target, TargetDensity
from .wasserstein import EXACT_SIZE_CAP


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    pipeline: str = "train"  # train | oracle | kde
    mode: str = "dyadic"  # single | dyadic
    # fixed: pin t0; theory: t0 = N^-r0 with the integer basis budget N;
    # theory-smooth: t0 = n^(-r0 d/(2s+d)), the same rule without the
    # integer rounding of N (desk-scale grids suffer bias plateaus and jumps
    # from the rounding otherwise)
    t0_mode: str = "fixed"
    t0: float = 1e-3
    t0_min: float = 1e-6
    k_max: int = 60
    delta: float = 0.05
    n_grid: tuple[int, ...] = (128, 256, 512, 1024, 2048, 4096)
    n_seeds: int = 5
    base_seed: int = 2025
    target_kind: str = "spline_mixture"
    target_dim: int = 1
    target_params: dict = field(default_factory=dict)
    schedules: dict = field(default_factory=dict)  # name -> section dict
    train_steps: int = 1500
    train_steps_growth: float = 0.0  # steps scale as (n / min_grid_n)^growth
    train_batch: int = 256
    train_lr: float = 3e-3
    train_beta1: float = 0.9
    train_beta2: float = 0.999
    width_scale: float = 8.0
    hidden_layers: int = 3
    clamp_d: float = 5.0
    eval_p: tuple[float, ...] = (1.0,)
    estimator: str = "quantile-true"  # quantile-true | reference | exact
    n_gen: int = 16384
    n_ref: int = 8192
    ode_steps_per_interval: int = 16
    out_dir: str = "out"

    def validate(self) -> list[str]:
        problems = []
        if self.pipeline not in ("train", "oracle", "kde"):
            problems.append(f"unknown pipeline {self.pipeline!r}")
        if self.mode not in ("single", "dyadic"):
            problems.append(f"unknown mode {self.mode!r}")
        if self.t0_mode not in ("fixed", "theory", "theory-smooth"):
            problems.append(f"unknown t0_mode {self.t0_mode!r}")
        if not 0 < self.t0 < 1:
            problems.append("t0 must be in (0, 1)")
        if len(self.n_grid) < 3:
            problems.append("n_grid needs at least 3 points for slope fitting")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            problems.append("n_grid must be strictly increasing")
        if self.n_seeds < 1:
            problems.append("n_seeds must be >= 1")
        if not self.schedules:
            problems.append("at least one [schedule.*] section required")
        if self.estimator not in ("quantile-true", "reference", "exact"):
            problems.append(f"unknown estimator {self.estimator!r}")
        if self.estimator == "quantile-true" and self.target_dim != 1:
            problems.append("quantile-true estimator requires a 1-d target")
        if self.estimator == "exact" and min(self.n_gen, self.n_ref) > EXACT_SIZE_CAP:
            problems.append(f"exact estimator capped at n={EXACT_SIZE_CAP}")
        for name, sec in self.schedules.items():
            try:
                Schedule.from_config(sec)
            except Exception as exc:
                problems.append(f"schedule {name}: {exc}")
        try:
            self.build_target()
        except Exception as exc:
            problems.append(f"target: {exc}")
        return problems

    def build_target(self) -> TargetDensity:
        return make_target(self.target_kind, self.target_dim, **self.target_params)

    def build_schedules(self) -> dict[str, Schedule]:
        return {name: Schedule.from_config(sec) for name, sec in self.schedules.items()}

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key in ("n_grid", "eval_p"):
            if key in d:
                d[key] = tuple(d[key])
        return ExperimentConfig(**d)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def parse_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()

    if parser.has_section("experiment"):
        sec = parser["experiment"]
        cfg.name = sec.get("name", cfg.name)
        cfg.pipeline = sec.get("pipeline", cfg.pipeline).strip().lower()
        cfg.mode = sec.get("mode", cfg.mode).strip().lower()
        cfg.t0_mode = sec.get("t0_mode", cfg.t0_mode).strip().lower()
        cfg.t0 = sec.getfloat("t0", cfg.t0)
        cfg.t0_min = sec.getfloat("t0_min", cfg.t0_min)
        cfg.k_max = sec.getint("k_max", cfg.k_max)
        cfg.delta = sec.getfloat("delta", cfg.delta)
        if "n_grid" in sec:
            cfg.n_grid = _parse_ints(sec["n_grid"])
        cfg.n_seeds = sec.getint("n_seeds", cfg.n_seeds)
        cfg.base_seed = sec.getint("base_seed", cfg.base_seed)

    if parser.has_section("target"):
        sec = parser["target"]
        cfg.target_kind = sec.get("kind", cfg.target_kind).strip().lower()
        cfg.target_dim = sec.getint("dim", cfg.target_dim)
        params: dict = {}
        for key in sec:
            if key in ("kind", "dim"):
                continue
            if key in ("coeffs", "amplitudes", "widths"):
                params[key] = _parse_floats(sec[key])
            elif key == "centers":
                vals = _parse_floats(sec[key])
                params[key] = [
                    vals[i : i + cfg.target_dim] for i in range(0, len(vals), cfg.target_dim)
                ]
            elif key in ("level", "order", "q", "coeff_seed"):
                params[key] = int(sec[key])
            else:
                params[key] = float(sec[key])
        cfg.target_params = params

    cfg.schedules = {}
    for section in parser.sections():
        if section.startswith("schedule.") or section == "schedule":
            name = section.split(".", 1)[1] if "." in section else "default"
            cfg.schedules[name] = dict(parser[section])

    if parser.has_section("train"):
        sec = parser["train"]
        cfg.train_steps = sec.getint("steps", cfg.train_steps)
        cfg.train_steps_growth = sec.getfloat("steps_growth", cfg.train_steps_growth)
        cfg.train_batch = sec.getint("batch", cfg.train_batch)
        cfg.train_lr = sec.getfloat("lr", cfg.train_lr)
        cfg.train_beta1 = sec.getfloat("beta1", cfg.train_beta1)
        cfg.train_beta2 = sec.getfloat("beta2", cfg.train_beta2)
        cfg.width_scale = sec.getfloat("width_scale", cfg.width_scale)
        cfg.hidden_layers = sec.getint("hidden_layers", cfg.hidden_layers)
        cfg.clamp_d = sec.getfloat("clamp_d", cfg.clamp_d)

    if parser.has_section("eval"):
        sec = parser["eval"]
        if "p" in sec:
            cfg.eval_p = _parse_floats(sec["p"])
        cfg.estimator = sec.get("estimator", cfg.estimator).strip().lower()
        cfg.n_gen = sec.getint("n_gen", cfg.n_gen)
        cfg.n_ref = sec.getint("n_ref", cfg.n_ref)
        cfg.ode_steps_per_interval = sec.getint(
            "ode_steps_per_interval", cfg.ode_steps_per_interval
        )

    if parser.has_section("output"):
        cfg.out_dir = parser["output"].get("dir", cfg.out_dir)

    return cfg


def write_example_config(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(EXAMPLE_CONFIG)


EXAMPLE_CONFIG = """\
# fmlab experiment configuration (INI grammar; '#' or ';' for comments)

[experiment]
name      = rate-1d
pipeline  = train
mode      = dyadic
t0_mode   = theory
t0        = 1e-3
t0_min    = 1e-6
delta     = 0.05
n_grid    = 128 256 512 1024 2048 4096
n_seeds   = 5
base_seed = 2025

[target]
kind = spline_mixture
dim  = 1
level = 3
order = 3
smoothness = 2

[schedule.vp]
family = variance_preserving

[schedule.affine]
family = affine

[train]
steps = 1500
batch = 256
lr    = 3e-3

[eval]
p = 1
estimator = quantile-true
n_gen = 16384
ode_steps_per_interval = 16

[output]
dir = out
"""
