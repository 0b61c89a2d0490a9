"""Acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v`` (criterion 1 takes a
few minutes on one core).
"""
import os

import numpy as np
import pytest
from scipy.integrate import quad

from gmereg import linops
from gmereg.cli import main as cli_main
from gmereg.declip import (
    DeclipConfig,
    build_problem,
    desk_mu_grid,
    draw_observation,
    full_protocol,
    run_grid,
)
from gmereg.fidelity import ClippedGaussianNLL, QuadraticFidelity, build_extension
from gmereg.gme import GmeRegularizer, design_B_invertible, gme_value, overall_convexity_check
from gmereg.proxlib import BoxIndicator, L1Norm
from gmereg.solver import (
    NrcProblem,
    SolverState,
    apply_T,
    choose_sigma_tau,
    compute_rho,
    km_solve,
    p_matrix_dense,
    p_norm_sq,
    sigma_lower_bound,
)

criterion = pytest.mark.criterion
CELLS = [(t, s) for t in (0.4, 0.6) for s in (5.0, 10.0, 15.0)]


def mc(z, b2):
    """Closed-form psi_B for |.| with scalar B^2 = b2 (reduces to |z| at b2 = 0)."""
    z = np.abs(z)
    if b2 == 0:
        return z
    return np.where(z <= 1 / b2, z - 0.5 * b2 * z * z, 0.5 / b2)


# 1 -------------------------------------------------------------------------------


@criterion(1, "GME beats l1 in all six (theta, SNR) cells at desk scale")
def test_c1_model_ordering(tmp_path):
    cfg = DeclipConfig(trials=20, mu_grid=desk_mu_grid(25), workers=os.cpu_count() or 1)
    res = run_grid(cfg)
    assert res.n_unconverged == 0
    best = {(b["theta"], b["snr_db"], b["model"]): b["mse"] for b in res.best()}
    lines = []
    for theta, snr in CELLS:
        l1, gme = best[(theta, snr, "l1")], best[(theta, snr, "gme")]
        lines.append(f"theta={theta} snr={snr:>4}dB  l1 {l1:.4f}  gme {gme:.4f}")
    print("\n".join(lines))
    for theta, snr in CELLS:
        assert best[(theta, snr, "gme")] < best[(theta, snr, "l1")], (theta, snr)


# 2 -------------------------------------------------------------------------------


def _grid_argmin(fun, lo, hi):
    """Minimize a scalar function by a 1e-3 grid, then a 1e-4 grid around the winner."""
    g = np.linspace(lo, hi, int(round((hi - lo) / 1e-3)) + 1)
    x0 = g[np.argmin(fun(g))]
    g = np.linspace(max(lo, x0 - 2e-3), min(hi, x0 + 2e-3), 41)
    return g[np.argmin(fun(g))]


@criterion(2, "tiny instances match exhaustive grid search within 2e-3")
def test_c2_tiny_grid_oracle():
    rng = np.random.default_rng(2024)
    for case in range(20):
        m = int(rng.integers(1, 5))
        I = linops.identity(m)
        lo, hi = -float(rng.uniform(1, 4)), float(rng.uniform(1, 4))
        mu = float(rng.uniform(0.2, 3.0))
        if case % 2:
            theta, s = 0.5, float(rng.uniform(0.3, 1.0))
            y = np.clip(rng.normal(0, 0.7, m), -theta, theta)
            y[0] = theta if case % 4 == 1 else -theta
            rows = [ClippedGaussianNLL([yi], s, theta) for yi in y]
            base = ClippedGaussianNLL(y, s, theta)
            f = build_extension(base, lo, hi)
        else:
            y = rng.normal(0, 2, m)
            rows = [QuadraticFidelity([yi]) for yi in y]
            base = f = QuadraticFidelity(y)
        lam = base.curvature_profile().lambda_diag
        B = design_B_invertible(I, lam, mu, 0.99)
        b2 = np.diag(linops.to_dense(B)) ** 2
        P = NrcProblem(I, f, GmeRegularizer(L1Norm(m), I, B, mu), I, BoxIndicator(lo, hi, m))
        x = km_solve(P, tol_sq=1e-14, max_iter=500_000)
        assert x.converged
        # A = L = Cmap = Id and diagonal B make the objective a sum of coordinate
        # terms over a product box, so the tensor-grid minimum is attained
        # coordinatewise
        oracle = np.array([
            _grid_argmin(lambda t, i=i: rows[i].value(t[None, :]) + mu * mc(t, b2[i]), lo, hi)
            for i in range(m)])
        assert np.max(np.abs(x.x - oracle)) <= 2e-3, (case, x.x, oracle)


# 3 -------------------------------------------------------------------------------


def _prox_grad_reference(A, y, mu, lo, hi, iters=200_000):
    """FISTA on 1/2 ||y - A x||^2 + mu ||x||_1 over a box."""
    L = np.linalg.norm(A, 2) ** 2
    x = z = np.zeros(A.shape[1])
    t = 1.0
    for _ in range(iters):
        v = z - A.T @ (A @ z - y) / L
        x_new = np.clip(np.sign(v) * np.maximum(np.abs(v) - mu / L, 0.0), lo, hi)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = x_new + (t - 1) / t_new * (x_new - x)
        if np.max(np.abs(x_new - x)) < 1e-15:
            return x_new
        x, t = x_new, t_new
    return x


@criterion(3, "B = 0 agrees with a proximal-gradient reference within 1e-5")
def test_c3_convex_special_case():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(2, 9))
        p = int(rng.integers(n, 12))
        A = rng.standard_normal((p, n))
        y = A @ (rng.standard_normal(n) * (rng.random(n) < 0.5)) + 0.1 * rng.standard_normal(p)
        mu = float(rng.uniform(0.1, 2.0))
        lo, hi = -1.0, 1.0
        I = linops.identity(n)
        reg = GmeRegularizer(L1Norm(n), I, linops.zero(n), mu)
        P = NrcProblem(linops.dense(A), QuadraticFidelity(y), reg, I, BoxIndicator(lo, hi, n))
        res = km_solve(P, tol_sq=1e-22, max_iter=2_000_000)
        ref = _prox_grad_reference(A, y, mu, lo, hi)
        assert res.converged
        assert np.max(np.abs(res.x - ref)) <= 1e-5


# 4 -------------------------------------------------------------------------------


def _random_valid_problem(rng):
    n, p, q = (int(v) for v in rng.integers(1, 7, 3))
    A = rng.standard_normal((p, n))
    Lm = rng.standard_normal((n, n)) + 3 * np.eye(n)
    if rng.random() < 0.5:
        theta, s = 0.5, float(rng.uniform(0.2, 1.0))
        y = np.clip(rng.normal(0, 0.6, p), -theta, theta)
        base = ClippedGaussianNLL(y, s, theta)
        f = build_extension(base, -10.0, 10.0)
    else:
        base = f = QuadraticFidelity(rng.standard_normal(p))
    mu = float(rng.uniform(0.1, 10.0))
    B = design_B_invertible(linops.dense(np.linalg.inv(Lm)), base.curvature_profile().lambda_diag,
                            mu, float(rng.uniform(0.1, 0.99)), A=linops.dense(A))
    reg = GmeRegularizer(L1Norm(n), linops.dense(Lm), B, mu)
    C = linops.dense(rng.standard_normal((q, n)))
    return NrcProblem(linops.dense(A), f, reg, C, BoxIndicator(-1.0, 1.0, q))


@criterion(4, "metric positive definite, theta in (0, 2), T nonexpansive in the metric")
def test_c4_step_certificates():
    rng = np.random.default_rng(4)
    for _ in range(50):
        P = _random_valid_problem(rng)
        S = choose_sigma_tau(P, kappa=float(rng.uniform(1.5, 10.0)))
        assert np.linalg.eigvalsh(p_matrix_dense(P, S))[0] > 0
        assert 0 < S.theta < 2
        nx, nz, nw = P.dims
        for _ in range(100):
            h1, h2 = (SolverState(*(rng.standard_normal(k) * 5 for k in (nx, nz, nz, nw)))
                      for _ in range(2))
            lhs = p_norm_sq(P, S, apply_T(P, S, h1) - apply_T(P, S, h2))
            assert np.sqrt(lhs) <= np.sqrt(p_norm_sq(P, S, h1 - h2)) * (1 + 1e-10)


# 5 -------------------------------------------------------------------------------


@criterion(5, "fidelity gradients, boundary value and extension continuity")
def test_c5_fidelity_analytics():
    rng = np.random.default_rng(5)
    m, theta = 10, 0.5
    y = np.clip(rng.normal(0, 0.6, m), -theta, theta)
    y[:2] = theta, -theta
    clipped = ClippedGaussianNLL(y, 0.4, theta)
    kinds = [QuadraticFidelity(rng.standard_normal(m)), clipped,
             build_extension(clipped, -1.0, 1.0)]
    h = 1e-6
    for f in kinds:
        for _ in range(100):
            u = rng.uniform(-2, 2, m)
            fd = np.array([(f.value(u + h * e) - f.value(u - h * e)) / (2 * h) for e in np.eye(m)])
            g = f.grad(u)
            assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1.0)

    # boundary branch at u = theta, s = 1 against quadrature of the tail integral
    I = quad(lambda t: np.exp(-t * t / 2), 0.0, np.inf, epsabs=0, epsrel=1e-13)[0]
    oracle = -np.log(I)
    assert oracle == pytest.approx(-np.log(np.sqrt(np.pi / 2)), abs=1e-12)
    assert ClippedGaussianNLL([0.4], 1.0, 0.4).value([0.4]) == pytest.approx(oracle, abs=1e-9)

    ext = build_extension(ClippedGaussianNLL(y, 0.4, theta), -10.0, 10.0)
    base = ext.base
    for _ in range(1000):
        u = rng.uniform(-10, 10, m)
        assert abs(ext.value(u) - base.value(u)) <= 1e-12
        assert np.max(np.abs(ext.grad(u) - base.grad(u))) <= 1e-12
    # one-sided limits at the box faces, each extrapolated to first order
    d = 1e-8
    for edge in (-10.0, 10.0):
        v_in, g_in, c_in = ext.row_terms(np.full(m, edge - d))
        v_out, g_out, c_out = ext.row_terms(np.full(m, edge + d))
        assert np.max(np.abs((v_out - d * g_out) - (v_in + d * g_in))) <= 1e-6
        assert np.max(np.abs((g_out - d * c_out) - (g_in + d * c_in))) <= 1e-6


# 6 -------------------------------------------------------------------------------


@criterion(6, "scalar GME penalty equals |x| - Huber(x); B = 0 gives the l1 norm")
def test_c6_gme_penalty():
    I = linops.identity(1)
    reg = GmeRegularizer(L1Norm(1), I, linops.identity(1), 1.0)
    z = np.arange(-5.0, 5.0 + 5e-4, 1e-3)
    vals = np.array([gme_value(reg, [t]).value for t in z])
    huber = np.where(np.abs(z) <= 1, 0.5 * z * z, np.abs(z) - 0.5)
    assert np.max(np.abs(vals - (np.abs(z) - huber))) <= 1e-6

    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        L = linops.dense(rng.standard_normal((n, n)))
        reg0 = GmeRegularizer(L1Norm(n), L, linops.zero(n), 1.0)
        x = rng.standard_normal(n) * 3
        assert abs(gme_value(reg0, L.apply(x)).value - np.abs(L.apply(x)).sum()) <= 1e-9


# 7 -------------------------------------------------------------------------------


@criterion(7, "convexity certificate holds across the sweep and fails at 1.01")
def test_c7_convexity_sweep():
    worst = np.inf
    for theta, snr in CELLS:
        cfg = DeclipConfig(theta=theta, snr_db=snr)
        for trial in range(cfg.trials):
            _, s, y = draw_observation(cfg, trial)
            lam = ClippedGaussianNLL(y, s, theta).curvature_profile().lambda_diag
            for mu in cfg.mu_grid:
                P = build_problem(y, s, theta, mu, "gme", cfg, lambda_diag=lam)
                ok, ev = overall_convexity_check(P.A, lam, P.reg)
                worst = min(worst, ev)
                assert ok and ev >= -1e-10
    print(f"smallest certificate eigenvalue over the sweep: {worst:.3e}")

    I = linops.identity(1)
    bad = GmeRegularizer(L1Norm(1), I, linops.diagonal([np.sqrt(1.01)]), 1.0)
    ok, ev = overall_convexity_check(I, [1.0], bad)
    assert not ok and ev == pytest.approx(-0.01, abs=1e-12)


# 8 -------------------------------------------------------------------------------


@criterion(8, "--full resolves to the published protocol and dry-run reports it")
def test_c8_protocol(tmp_path, capsys):
    cfgfile = tmp_path / "run.ini"
    cfgfile.write_text("[declip]\ntrials = 7\nmu_count = 9\ntol_sq = 1e-2\n")
    assert cli_main(["declip", "--config", str(cfgfile), "--full", "--dry-run"]) == 0
    kv = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
    assert kv["trials"] == "100"
    assert kv["mu_count"] == "100" and kv["mu_integers"] == "true"
    assert kv["mu_grid"] == ", ".join(str(j) for j in range(1, 101))
    assert float(kv["tol_sq"]) == 1e-4
    assert kv["tau"] == "5 / (2 rho)"
    assert kv["sigma"] == "1.001 x step-size lower bound"
    assert kv["m"] == "256" and kv["box"] == "[-10, 10]" and kv["c_gme"] == "0.99"
    assert kv["thetas"] == "0.4, 0.6" and kv["snrs_db"] == "5, 10, 15"

    # the resolved settings drive the step rule as stated
    cfg = full_protocol(DeclipConfig(tol_sq=1e-2, kappa=2.0, trials=7))
    _, s, y = draw_observation(cfg, 0)
    for model in ("l1", "gme"):
        P = build_problem(y, s, cfg.theta, 50.0, model, cfg)
        S = choose_sigma_tau(P, cfg.kappa, cfg.sigma_factor)
        rho = compute_rho(P)
        assert S.tau * 2 * rho == pytest.approx(5.0, rel=1e-14)
        assert S.sigma / sigma_lower_bound(P, rho, S.tau) == pytest.approx(1.001, rel=1e-14)
