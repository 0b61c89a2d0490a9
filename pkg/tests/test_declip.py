import csv
from dataclasses import replace

import numpy as np
import pytest

from gmereg import linops
from gmereg.declip import (
    DeclipConfig,
    ExperimentResult,
    build_problem,
    clip,
    draw_observation,
    expected_noise_norm,
    full_protocol,
    plot_svg,
    run_experiment,
    run_trial,
    snr_to_sigma,
    synthesize_truth,
    write_aggregate_csv,
    write_results_csv,
)
from gmereg.gme import overall_convexity_check
from gmereg.solver import km_solve, objective


def test_clip_examples():
    np.testing.assert_array_equal(clip([0.3, 0.9, -0.5, 0.4, -0.4], 0.4),
                                  [0.3, 0.4, -0.4, 0.4, -0.4])


def test_truth_normalization_and_sparsity():
    cfg = DeclipConfig()
    for seed in range(5):
        x = synthesize_truth(cfg, np.random.default_rng(seed))
        assert np.max(np.abs(x)) == pytest.approx(0.8, abs=1e-12)
        coef = linops.dct(cfg.m).apply(x)
        assert np.sum(np.abs(coef) > 1e-12) == cfg.sparsity_k


def test_truth_deterministic():
    cfg = DeclipConfig()
    a = synthesize_truth(cfg, np.random.default_rng(7))
    b = synthesize_truth(cfg, np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert np.array_equal(draw_observation(cfg, 3)[2], draw_observation(cfg, 3)[2])


def test_snr_scaling():
    x = synthesize_truth(DeclipConfig(), np.random.default_rng(0))
    s1 = snr_to_sigma(x, 10.0)
    assert snr_to_sigma(x, 10.0 + 20 * np.log10(2)) == pytest.approx(s1 / 2, rel=1e-12)
    with pytest.raises(ValueError):
        snr_to_sigma(np.zeros(4), 10.0)


def test_chi_mean_m1_monte_carlo():
    rng = np.random.default_rng(40)
    est = np.abs(rng.standard_normal(1_000_000)).mean()
    assert expected_noise_norm(1) == pytest.approx(np.sqrt(2 / np.pi), rel=1e-12)
    assert est == pytest.approx(expected_noise_norm(1), rel=5e-3)


def test_snr_round_trip_monte_carlo():
    rng = np.random.default_rng(41)
    x = synthesize_truth(DeclipConfig(), rng)
    for snr in (5.0, 10.0, 15.0):
        s = snr_to_sigma(x, snr)
        norms = np.linalg.norm(s * rng.standard_normal((10_000, x.size)), axis=1)
        assert 20 * np.log10(np.linalg.norm(x) / norms.mean()) == pytest.approx(snr, abs=0.05)


def test_config_validation():
    for bad in (dict(trials=0), dict(theta=0.0), dict(sparsity_k=0), dict(mu_grid=()),
                dict(mu_grid=(1.0, -2.0)), dict(c_gme=1.0), dict(truth="noise")):
        with pytest.raises(ValueError):
            DeclipConfig(**bad)


def test_full_protocol():
    cfg = full_protocol(DeclipConfig(seed=3))
    assert cfg.trials == 100
    assert cfg.mu_grid == tuple(float(j) for j in range(1, 101))
    assert (cfg.tol_sq, cfg.kappa, cfg.sigma_factor, cfg.c_gme, cfg.box, cfg.m) == (
        1e-4, 5.0, 1.001, 0.99, 10.0, 256)
    assert cfg.seed == 3


def test_noiseless_recovery():
    # with s = 1e-6 the default 1e-4 stop halts the GME solve early, so
    # this check runs with a tighter residual threshold
    cfg = DeclipConfig(theta=10.0, noise_std=1e-6, trials=1, mu_grid=(1e-3,), tol_sq=1e-8)
    rows = run_trial(cfg, 0)
    assert {r.model for r in rows} == {"l1", "gme"}
    for r in rows:
        assert r.converged and r.mse < 1e-4


def test_zero_signal():
    cfg = DeclipConfig(m=64, truth="zero", noise_std=0.1, trials=1)
    res = run_experiment(cfg)
    _, s, y = draw_observation(cfg, 0)
    D = linops.dct(cfg.m)
    for b in res.best():
        assert b["mse"] <= cfg.m * s * s
        x = km_solve(build_problem(y, s, cfg.theta, b["best_mu"], b["model"], cfg)).x
        assert np.sum(np.abs(D.apply(x)) > 1e-2) <= cfg.m // 8


def test_solutions_feasible_and_gated():
    cfg = DeclipConfig(m=64, theta=0.4, trials=1)
    x_true, s, y = draw_observation(cfg, 0)
    for mu in (1.0, 10.0, 100.0):
        for model in ("l1", "gme"):
            P = build_problem(y, s, cfg.theta, mu, model, cfg)
            if model == "gme":
                lam = P.f.base.curvature_profile().lambda_diag
                assert overall_convexity_check(P.A, lam, P.reg).passed
            x = km_solve(P).x
            assert np.all(np.abs(x) <= 10 + 1e-8)


def test_gme_objective_not_worse_at_l1_solution():
    cfg = DeclipConfig(m=32, sparsity_k=4, theta=0.4, trials=1)
    _, s, y = draw_observation(cfg, 1)
    for mu in (3.0, 30.0):
        P_l1 = build_problem(y, s, cfg.theta, mu, "l1", cfg)
        P_gme = build_problem(y, s, cfg.theta, mu, "gme", cfg)
        x_l1 = km_solve(P_l1, tol_sq=1e-12).x
        x_gme = km_solve(P_gme, tol_sq=1e-12).x
        assert objective(P_gme, x_gme) <= objective(P_gme, x_l1) + 1e-6


def test_experiment_deterministic_and_parallel(tmp_path):
    cfg = DeclipConfig(m=32, sparsity_k=4, trials=3, mu_grid=(1.0, 10.0))
    a = run_experiment(cfg)
    b = run_experiment(replace(cfg, workers=2))
    assert a.rows == b.rows
    paths = []
    for tag, res in (("a", a), ("b", b)):
        p = tmp_path / f"{tag}.csv"
        write_results_csv(res, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_results_and_aggregate_csv(tmp_path):
    cfg = DeclipConfig(m=32, sparsity_k=4, trials=2, mu_grid=(1.0, 10.0))
    res = run_experiment(cfg)
    assert len(res.rows) == 2 * 2 * 2
    write_results_csv(res, tmp_path / "r.csv")
    write_aggregate_csv(res, tmp_path / "agg.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["model", "theta", "snr_db", "mu", "trial", "mse", "iterations",
                             "converged"]
    agg = list(csv.DictReader(open(tmp_path / "agg.csv")))
    assert [r["model"] for r in agg] == ["l1", "gme"]
    for r in agg:
        best = min(np.mean([float(x["mse"]) for x in rows
                            if x["model"] == r["model"] and x["mu"] == mu])
                   for mu in {x["mu"] for x in rows})
        assert float(r["mse"]) == pytest.approx(best, rel=1e-12)
    plot_svg(tmp_path / "agg.csv", tmp_path / "fig.svg")
    assert (tmp_path / "fig.svg").read_text().lstrip().startswith("<?xml")


def test_unconverged_rows_excluded():
    cfg = DeclipConfig(m=32, sparsity_k=4, trials=1, mu_grid=(5.0,), max_iter=2, tol_sq=1e-12)
    res = run_experiment(cfg)
    assert res.n_unconverged == 2
    assert all(np.isnan(b["mse"]) and b["n_converged"] == 0 for b in res.best())
    assert isinstance(res, ExperimentResult)
