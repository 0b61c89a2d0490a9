"""Command-line front end.

Three subcommands, each driven by one INI file::

    gmereg solve   --config run.ini [--out DIR] [--dry-run]
    gmereg declip  --config run.ini [--out DIR] [--seed N] [--full] [--dry-run]
    gmereg check   --config run.ini [--seed N]

Exit codes: 0 success, 1 a diagnostic failed (``check``), 2 bad
configuration or input, 3 convexity certificate failed, 4 unconverged.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import linops
from .declip import (
    DeclipConfig,
    build_problem,
    desk_mu_grid,
    draw_observation,
    full_protocol,
    plot_svg,
    run_grid,
    write_aggregate_csv,
    write_results_csv,
)
from .fidelity import (
    EXTERNAL_CLIP_TOL,
    ClippedGaussianNLL,
    QuadraticFidelity,
    build_extension,
)
from .gme import GmeRegularizer, design_B_invertible, overall_convexity_check
from .linops import DiagnosticUnavailable
from .proxlib import BoxIndicator, L1Norm
from .solver import (
    NrcProblem,
    ParameterSelectionError,
    SolverState,
    apply_T,
    choose_sigma_tau,
    existence_diagnostics,
    km_solve,
    p_matrix_dense,
    p_norm_sq,
)

logger = logging.getLogger("gmereg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NOT_CONVEX, EXIT_UNCONVERGED = 0, 1, 2, 3, 4
FULL_THETAS = (0.4, 0.6)
FULL_SNRS = (5.0, 10.0, 15.0)


class ConfigError(ValueError):
    """Unusable configuration or input file."""


# --- config access -------------------------------------------------------------


def _read_config(path) -> tuple[configparser.ConfigParser, Path]:
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return cp, path.parent


def _get(cp, section, key, default=None, conv=str):
    if not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key).strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(t) for t in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _load_array(entry: str, base: Path, ndmin: int) -> np.ndarray:
    path = Path(entry)
    if not path.is_absolute():
        path = base / path
    try:
        arr = np.loadtxt(path, ndmin=ndmin, dtype=float)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load {path}: {exc}") from exc
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path} contains non-finite entries")
    return arr


def _operator(entry: str, base: Path, n: int) -> linops.LinearMap:
    key = entry.lower()
    if key == "identity":
        return linops.identity(n)
    if key == "dct":
        return linops.dct(n)
    if key == "zero":
        return linops.zero(n)
    M = _load_array(entry, base, 2)
    if M.shape[1] != n:
        raise ConfigError(f"{entry}: expected {n} columns, got {M.shape[1]}")
    return linops.dense(M)


def _inverse(entry: str, L: linops.LinearMap) -> linops.LinearMap:
    key = entry.lower()
    if key == "identity":
        return linops.identity(L.in_dim)
    if key == "dct":
        return linops.inverse_dct(L.in_dim)
    Ld = linops.to_dense(L)
    if Ld.shape[0] != Ld.shape[1]:
        raise ConfigError("B = design needs a square invertible L")
    try:
        return linops.dense(np.linalg.inv(Ld))
    except np.linalg.LinAlgError as exc:
        raise ConfigError("B = design needs an invertible L") from exc


# --- problem assembly ------------------------------------------------------------


@dataclass
class BuiltProblem:
    problem: NrcProblem
    lambda_diag: np.ndarray


def problem_from_config(cp, base: Path) -> BuiltProblem:
    """Assemble an :class:`NrcProblem` from the ``[problem]`` section."""
    sec = "problem"
    if not cp.has_section(sec):
        raise ConfigError("missing [problem] section")
    y = _load_array(_get(cp, sec, "y"), base, 1)
    m = y.size
    A_entry = _get(cp, sec, "A", "identity")
    if A_entry.lower() == "identity":
        A = linops.identity(m)
    else:
        M = _load_array(A_entry, base, 2)
        if M.shape[0] != m:
            raise ConfigError(f"A has {M.shape[0]} rows but y has {m} entries")
        A = linops.dense(M)
    n = A.in_dim
    mu = _get(cp, sec, "mu", conv=float)
    if not mu > 0:
        raise ConfigError("mu must be positive")

    L_entry = _get(cp, sec, "L", "identity")
    L = _operator(L_entry, base, n)
    C = _operator(_get(cp, sec, "C", "identity"), base, n)
    lo = _get(cp, sec, "box_lower", -10.0, float)
    hi = _get(cp, sec, "box_upper", 10.0, float)
    try:
        box = BoxIndicator(lo, hi, C.out_dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    kind = _get(cp, sec, "fidelity", "quadratic").lower()
    try:
        if kind == "quadratic":
            base_f = QuadraticFidelity(y)
            f = base_f
        elif kind == "clipped_gaussian_nll":
            s = _get(cp, sec, "s", conv=float)
            theta = _get(cp, sec, "theta", conv=float)
            base_f = ClippedGaussianNLL(y, s, theta, clip_tol=EXTERNAL_CLIP_TOL)
            if cp.has_option(sec, "pi_lower") or cp.has_option(sec, "pi_upper"):
                pl = _get(cp, sec, "pi_lower", -np.inf, float)
                pu = _get(cp, sec, "pi_upper", np.inf, float)
            elif A.kind == "identity" and C.kind == "identity":
                # the fidelity is only needed exactly on the constraint box
                pl, pu = lo, hi
            else:
                raise ConfigError("clipped fidelity with general A or C needs pi_lower/pi_upper")
            f = build_extension(base_f, pl, pu)
        else:
            raise ConfigError(f"unknown fidelity {kind!r}")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lam = base_f.curvature_profile().lambda_diag

    B_entry = _get(cp, sec, "B", "zero")
    if B_entry.lower() == "zero":
        B = linops.zero(L.out_dim)
    elif B_entry.lower() == "design":
        c = _get(cp, sec, "c_gme", 0.99, float)
        try:
            B = design_B_invertible(_inverse(L_entry, L), lam, mu, c, A=A)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        M = _load_array(B_entry, base, 2)
        if M.shape[1] != L.out_dim:
            raise ConfigError(f"B must have {L.out_dim} columns")
        B = linops.dense(M)
    scale = _get(cp, sec, "b_scale", 1.0, float)
    if scale != 1.0:
        B = linops.scaled(scale, B)

    reg = GmeRegularizer(L1Norm(L.out_dim), L, B, mu)
    beta = _get(cp, "solver", "beta", 0.0, float) if cp.has_section("solver") else 0.0
    try:
        P = NrcProblem(A, f, reg, C, box, beta=beta or None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return BuiltProblem(P, lam)


def declip_config_from(cp, args) -> tuple[DeclipConfig, tuple, tuple]:
    """``DeclipConfig`` plus the clip levels and SNRs to sweep."""
    sec = "declip"
    kw = {}
    if cp.has_section(sec):
        conv = {f.name: f.type for f in fields(DeclipConfig)}
        for key, raw in cp.items(sec):
            if key in ("thetas", "snrs", "mu_count", "svg"):
                continue
            if key not in conv:
                raise ConfigError(f"unknown [declip] key {key!r}")
            typ = conv[key]
            try:
                if key == "mu_grid":
                    kw[key] = _floats(raw)
                elif key == "noise_std":
                    kw[key] = None if raw.lower() == "none" else float(raw)
                elif key == "truth":
                    kw[key] = raw
                elif typ == "int":
                    kw[key] = int(raw)
                else:
                    kw[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for [declip] {key}: {raw!r}") from exc
        if "mu_grid" not in kw and cp.has_option(sec, "mu_count"):
            kw["mu_grid"] = desk_mu_grid(_get(cp, sec, "mu_count", conv=int))
    if args.seed is not None:
        kw["seed"] = args.seed
    try:
        cfg = DeclipConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    thetas = _get(cp, sec, "thetas", (cfg.theta,), _floats) if cp.has_section(sec) else (cfg.theta,)
    snrs = _get(cp, sec, "snrs", (cfg.snr_db,), _floats) if cp.has_section(sec) else (cfg.snr_db,)
    if getattr(args, "full", False):
        cfg = full_protocol(cfg)
        thetas, snrs = FULL_THETAS, FULL_SNRS
    return cfg, tuple(thetas), tuple(snrs)


def _solver_settings(cp) -> dict:
    sec = "solver"
    if not cp.has_section(sec):
        return dict(kappa=5.0, tol_sq=1e-4, max_iter=200_000, seed=0, objective_every=100)
    return dict(kappa=_get(cp, sec, "kappa", 5.0, float),
                tol_sq=_get(cp, sec, "tol_sq", 1e-4, float),
                max_iter=_get(cp, sec, "max_iter", 200_000, int),
                seed=_get(cp, sec, "seed", 0, int),
                objective_every=_get(cp, sec, "objective_every", 100, int))


def _out_dir(cp, args) -> Path:
    out = args.out or (cp.get("output", "dir", fallback=None) if cp.has_section("output") else None)
    out = Path(out or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


# --- subcommands ---------------------------------------------------------------------


def cmd_solve(args) -> int:
    cp, base = _read_config(args.config)
    built = problem_from_config(cp, base)
    P = built.problem
    opts = _solver_settings(cp)
    try:
        cert = overall_convexity_check(P.A, built.lambda_diag, P.reg)
    except DiagnosticUnavailable as exc:
        print(f"convexity certificate unavailable: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVEX
    if not cert.passed:
        print(f"refusing to solve: overall convexity fails (min eigenvalue {cert.min_eig:.3e})",
              file=sys.stderr)
        return EXIT_NOT_CONVEX
    report = existence_diagnostics(P)
    try:
        S = choose_sigma_tau(P, kappa=opts["kappa"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    summary = [f"rho = {S.rho!r}", f"sigma = {S.sigma!r}", f"tau = {S.tau!r}",
               f"theta = {S.theta!r}", f"tol_sq = {opts['tol_sq']!r}",
               f"max_iter = {opts['max_iter']}", f"convexity_min_eig = {cert.min_eig!r}",
               f"existence = {report.condition_i}, {report.condition_ii}, {report.condition_iii}"]
    if args.dry_run:
        print("\n".join(summary))
        return EXIT_OK
    out = _out_dir(cp, args)
    res = km_solve(P, S, tol_sq=opts["tol_sq"], max_iter=opts["max_iter"],
                   objective_every=opts["objective_every"])
    np.savetxt(out / "x.txt", res.x, fmt="%.17g")
    res.write_trace_csv(out / "trace.csv")
    summary += [f"iterations = {res.iterations}", f"converged = {str(res.converged).lower()}"]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print(f"{'converged' if res.converged else 'NOT converged'} after {res.iterations} "
          f"iterations; wrote {out / 'x.txt'}")
    return EXIT_OK if res.converged else EXIT_UNCONVERGED


def _protocol_lines(cfg: DeclipConfig, thetas, snrs) -> list[str]:
    grid = cfg.mu_grid
    integers = all(float(v).is_integer() for v in grid)
    return [
        f"m = {cfg.m}",
        f"trials = {cfg.trials}",
        f"thetas = {', '.join(f'{t:g}' for t in thetas)}",
        f"snrs_db = {', '.join(f'{s:g}' for s in snrs)}",
        f"mu_count = {len(grid)}",
        f"mu_min = {min(grid):g}",
        f"mu_max = {max(grid):g}",
        f"mu_integers = {str(integers).lower()}",
        f"mu_grid = {', '.join(f'{v:g}' for v in grid)}",
        f"tol_sq = {cfg.tol_sq:g}",
        f"tau = {cfg.kappa:g} / (2 rho)",
        f"sigma = {cfg.sigma_factor:g} x step-size lower bound",
        f"c_gme = {cfg.c_gme:g}",
        f"box = [{-cfg.box:g}, {cfg.box:g}]",
        f"max_iter = {cfg.max_iter}",
        f"seed = {cfg.seed}",
    ]


def cmd_declip(args) -> int:
    cp, _ = _read_config(args.config)
    cfg, thetas, snrs = declip_config_from(cp, args)
    if args.dry_run:
        print("\n".join(_protocol_lines(cfg, thetas, snrs)))
        return EXIT_OK
    out = _out_dir(cp, args)
    result = run_grid(cfg, thetas, snrs)
    write_results_csv(result, out / "results.csv")
    write_aggregate_csv(result, out / "aggregate.csv")
    svg = _get(cp, "declip", "svg", False, _bool) if cp.has_section("declip") else False
    if svg:
        plot_svg(out / "aggregate.csv", out / "mse.svg")
    best = result.best()
    for b in best:
        print(f"theta={b['theta']:g} snr={b['snr_db']:g}dB {b['model']:>3}: "
              f"best mu={b['best_mu']:g} mse={b['mse']:.6g} ({b['n_converged']} converged)")
    if result.n_unconverged:
        print(f"{result.n_unconverged} solves did not converge", file=sys.stderr)
    if any(b["n_converged"] == 0 for b in best):
        return EXIT_UNCONVERGED
    return EXIT_OK


def _check_problem(cp, base, args) -> BuiltProblem:
    if cp.has_section("problem"):
        return problem_from_config(cp, base)
    cfg, _, _ = declip_config_from(cp, args)
    _, s, y = draw_observation(cfg, 0)
    mu = _get(cp, "check", "mu", float(np.median(cfg.mu_grid)), float) \
        if cp.has_section("check") else float(np.median(cfg.mu_grid))
    P = build_problem(y, s, cfg.theta, mu, "gme", cfg)
    lam = P.f.base.curvature_profile().lambda_diag
    scale = _get(cp, "check", "b_scale", 1.0, float) if cp.has_section("check") else 1.0
    if scale != 1.0:
        reg = GmeRegularizer(P.reg.psi, P.L, linops.scaled(scale, P.B), P.mu)
        P = NrcProblem(P.A, P.f, reg, P.Cmap, P.Cset)
    return BuiltProblem(P, lam)


def run_checks(P: NrcProblem, lam, rng: np.random.Generator, pairs: int = 20):
    """``[(name, passed, detail)]`` for every diagnostic invariant."""
    rows = []

    def adjoint_gap(Lmap):
        worst = 0.0
        for _ in range(10):
            x = rng.standard_normal(Lmap.in_dim)
            y = rng.standard_normal(Lmap.out_dim)
            gap = abs(Lmap.apply(x) @ y - x @ Lmap.adjoint_apply(y))
            worst = max(worst, gap / (1 + np.linalg.norm(x) * np.linalg.norm(y)))
        return worst

    for name, Lmap in (("A", P.A), ("L", P.L), ("B", P.B), ("C", P.Cmap)):
        g = adjoint_gap(Lmap)
        rows.append((f"adjoint {name}", g <= 1e-10, f"rel gap {g:.1e}"))

    worst = 0.0
    for _ in range(5):
        u = rng.uniform(-1, 1, P.f.m)
        h = 1e-6
        fd = np.array([(P.f.value(u + h * e) - P.f.value(u - h * e)) / (2 * h)
                       for e in np.eye(P.f.m)])
        g = P.f.grad(u)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1.0))
    rows.append(("fidelity gradient", worst < 1e-5, f"rel err {worst:.1e}"))

    try:
        cert = overall_convexity_check(P.A, lam, P.reg)
        rows.append(("overall convexity", cert.passed, f"min eig {cert.min_eig:.3e}"))
    except DiagnosticUnavailable as exc:
        rows.append(("overall convexity", False, str(exc)))

    try:
        S = choose_sigma_tau(P)
    except ParameterSelectionError as exc:
        rows.append(("step parameters", False, str(exc)))
        return rows
    rows.append(("theta in (0, 2)", 0 < S.theta < 2, f"theta {S.theta:.6f}"))
    try:
        ev = np.linalg.eigvalsh(p_matrix_dense(P, S))[0]
        rows.append(("metric positive definite", ev > 0, f"min eig {ev:.3e}"))
    except DiagnosticUnavailable:
        n = P.norms
        margin = S.sigma - P.mu * n.LC - P.mu**2 * n.BBL_sq / S.tau
        rows.append(("metric positive definite", margin > 0, f"schur margin {margin:.3e}"))

    nx, nz, nw = P.dims
    worst = 0.0
    for _ in range(pairs):
        h1, h2 = (SolverState(*(rng.standard_normal(k) for k in (nx, nz, nz, nw)))
                  for _ in range(2))
        lhs = p_norm_sq(P, S, apply_T(P, S, h1) - apply_T(P, S, h2))
        rhs = p_norm_sq(P, S, h1 - h2)
        worst = max(worst, np.sqrt(max(lhs, 0.0) / rhs))
    rows.append(("T nonexpansive", worst <= 1 + 1e-10, f"max ratio {worst:.12f}"))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = existence_diagnostics(P)
    rows.append(("minimizer exists", rep.certified,
                 f"(i) {rep.condition_i} (ii) {rep.condition_ii} (iii) {rep.condition_iii}"))
    return rows


def cmd_check(args) -> int:
    cp, base = _read_config(args.config)
    seed = args.seed if args.seed is not None else _solver_settings(cp)["seed"]
    built = _check_problem(cp, base, args)
    rows = run_checks(built.problem, built.lambda_diag, np.random.default_rng(seed))
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all(r[1] for r in rows) else EXIT_CHECK_FAILED


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmereg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("solve", help="solve one problem from files")
    common(p)
    p.add_argument("--dry-run", action="store_true", help="print step parameters and stop")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("declip", help="run the declipping experiment")
    common(p)
    p.add_argument("--full", action="store_true",
                   help="100 trials, mu in 1..100, all six (theta, SNR) cells")
    p.add_argument("--dry-run", action="store_true", help="print the resolved protocol and stop")
    p.set_defaults(func=cmd_declip)

    p = sub.add_parser("check", help="run the diagnostic suite")
    common(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
