import json
import math
from pathlib import Path

import numpy as np
import pytest

from fmlab.config import ExperimentConfig, parse_config, EXAMPLE_CONFIG
from fmlab.harness import HarnessError, fit_slope, report, run, w_p_to_quantile
from fmlab.targets import make_target


def smoke_config(**over):
    base = dict(
        name="smoke",
        pipeline="oracle",
        mode="dyadic",
        t0_mode="fixed",
        t0=1e-2,
        n_grid=(32, 64, 128),
        n_seeds=2,
        base_seed=7,
        target_kind="spline_mixture",
        target_dim=1,
        target_params={"smoothness": 2},
        schedules={"affine": {"family": "affine"}},
        eval_p=(1.0,),
        estimator="quantile-true",
        n_gen=1024,
        ode_steps_per_interval=8,
    )
    base.update(over)
    return ExperimentConfig(**base)


def test_fit_slope_exact_power_law():
    pts = [(n, 3.0 * n**-0.5) for n in (10, 100, 1000, 10000)]
    slope, se = fit_slope(pts)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert se <= 1e-12


def test_fit_slope_constant():
    slope, se = fit_slope([(10, 2.0), (100, 2.0), (1000, 2.0)])
    assert slope == pytest.approx(0.0, abs=1e-14)


def test_fit_slope_noisy_recovery():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(100):
        ns = [128 * 2**k for k in range(6)]
        vals = [2.0 * n**-0.5 * math.exp(0.1 * rng.standard_normal()) for n in ns]
        slope, _ = fit_slope(list(zip(ns, vals)))
        hits += abs(slope + 0.5) <= 0.1
    assert hits >= 95


def test_fit_slope_validation():
    with pytest.raises(HarnessError):
        fit_slope([(10, 1.0), (20, 0.5)])
    with pytest.raises(HarnessError):
        fit_slope([(10, 1.0), (10, 0.5), (10, 0.7)])
    with pytest.raises(HarnessError):
        fit_slope([(10, 1.0), (20, -0.5), (40, 0.2)])


def test_w_p_to_quantile_exact_for_uniform():
    # empirical sample vs the uniform quantile function: compare to the
    # closed-form integral sum_i int |x_(i) - Q(u)| du on rank slabs
    target = make_target("uniform", 1)
    rng = np.random.default_rng(3)
    xs = np.sort(rng.uniform(-1, 1, 64))
    qfn = lambda u: 2.0 * u - 1.0
    got = w_p_to_quantile(xs, qfn, 1.0)
    direct = 0.0
    m = xs.size
    for i, x in enumerate(xs):
        us = np.linspace(i / m, (i + 1) / m, 2001)
        direct += np.trapezoid(np.abs(x - qfn(us)), us)
    assert got == pytest.approx(direct, abs=1e-6)


def test_config_example_parses_and_validates(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text(EXAMPLE_CONFIG)
    cfg = parse_config(path)
    assert cfg.name == "rate-1d"
    assert set(cfg.schedules) == {"vp", "affine"}
    assert cfg.n_grid == (128, 256, 512, 1024, 2048, 4096)
    assert cfg.validate() == []


def test_config_validation_catches_problems():
    cfg = smoke_config(n_grid=(64, 32, 128))
    assert any("increasing" in p for p in cfg.validate())
    cfg = smoke_config(n_grid=(32, 64))
    assert any("3 points" in p for p in cfg.validate())
    cfg = smoke_config(schedules={})
    assert any("schedule" in p for p in cfg.validate())
    cfg = smoke_config(estimator="quantile-true", target_dim=2, target_kind="spline_mixture")
    assert any("1-d" in p for p in cfg.validate())
    with pytest.raises(HarnessError):
        run(smoke_config(schedules={}), "/tmp/never", parallel=1)


def test_oracle_run_outputs_and_determinism(tmp_path):
    cfg = smoke_config()
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    s1 = run(cfg, out1, parallel=2)
    s2 = run(cfg, out2, parallel=1)
    csv1 = (out1 / "results.csv").read_bytes()
    csv2 = (out2 / "results.csv").read_bytes()
    assert csv1 == csv2
    assert s1["failed_fraction"] == 0.0
    rep = json.loads((out1 / "report.json").read_text())
    assert rep["slopes"] and rep["theory"]["per_schedule"]["affine"]["kappa"] == 1.0
    header = (out1 / "results.csv").read_text().splitlines()[0]
    assert header == "target,schedule,kappa,n,seed,p,w_value,t0,mode"
    dat = list((out1 / "plots").glob("*.dat"))
    assert dat and dat[0].read_text().startswith("#")


def test_oracle_w_decreases_with_n(tmp_path):
    cfg = smoke_config(n_grid=(32, 128, 512), n_seeds=2, n_gen=2048)
    summary = run(cfg, tmp_path / "run", parallel=2)
    points = summary["slopes"][0]["points"]
    values = [v for _, v in points]
    inversions = sum(b > a for a, b in zip(values, values[1:]))
    assert inversions <= 1
    assert summary["slopes"][0]["slope"] < 0


def test_report_rebuild_is_stable(tmp_path):
    cfg = smoke_config(n_grid=(32, 64, 128))
    out = tmp_path / "run"
    run(cfg, out, parallel=1)
    first = (out / "report.json").read_bytes()
    report(out)
    assert (out / "report.json").read_bytes() == first


def test_kde_pipeline_runs(tmp_path):
    cfg = smoke_config(pipeline="kde", n_gen=2048)
    summary = run(cfg, tmp_path / "kde", parallel=1)
    assert summary["failed_fraction"] == 0.0
    assert summary["slopes"][0]["slope"] < 0


def test_seed_offset_changes_results(tmp_path):
    cfg = smoke_config(n_grid=(32, 64, 128), n_seeds=1)
    run(cfg, tmp_path / "a", parallel=1, seed_offset=0)
    run(cfg, tmp_path / "b", parallel=1, seed_offset=1)
    assert (tmp_path / "a/results.csv").read_text() != (tmp_path / "b/results.csv").read_text()


def test_cli_theory_and_validate(tmp_path, capsys):
    from fmlab.cli import main

    assert main(["theory", "--s", "1", "--d", "2", "--kappa", "0.5", "--n", "10000"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["upper_rate_exponent"] == 0.5
    assert out["minimax_lower_exponent"] == 0.5
    assert out["basis_budget"] == 100

    path = tmp_path / "cfg.ini"
    path.write_text(EXAMPLE_CONFIG)
    assert main(["validate", str(path)]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nn_grid = 8 4\n\n[schedule.a]\nfamily = affine\n")
    assert main(["validate", str(bad)]) == 1
