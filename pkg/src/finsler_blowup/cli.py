"""Command-line entry point: ``finsler-blowup {norms,distance,solve,ergodic,sweep}``."""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config, parse_config
from .geometry import GeometryError, build_grid, distance_bruteforce, distance_fast_march, eikonal_report
from .norms import Family, identity_suite
from .pde import NonConvergence, Regime, SingularJacobian, gradient_diagnostic, solve_blowup

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("norms", "distance", "solve", "ergodic", "sweep")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, ±inf to strings, NaN to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_json(path, payload: dict):
    body = {"schema_version": SCHEMA_VERSION, **payload}
    text = json.dumps(_clean(body), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _finish(out: Path, command: str, checks: dict) -> int:
    failed = sorted(k for k, v in checks.items() if not v)
    if failed:
        write_json(out / "failure.json", {"command": command, "failed_checks": failed, "checks": checks})
        return EXIT_FAIL
    return EXIT_OK


def _distance(cfg: RunConfig):
    grid = build_grid(cfg.domain, cfg.resolution)
    return distance_fast_march(grid, cfg.norm, band_fraction=cfg.tol("band_fraction"))


def _plot(cfg, fn, *args, **kw):
    if cfg.plots:
        from . import plotting

        getattr(plotting, fn)(*args, **kw)


# ---------------------------------------------------------------------------


def cmd_norms(cfg: RunConfig, out: Path) -> int:
    rep = identity_suite(cfg.norm, samples=int(cfg.tol("norm_samples")), seed=cfg.seed)
    write_json(out / "report.json", {
        "command": "norms",
        "norm": cfg.norm.to_dict(),
        "seed": cfg.seed,
        "samples": rep["samples"],
        "tolerance": rep["tolerance"],
        "identity": rep["violations"],
        "ellipticity": rep["ellipticity"],
        "passed": rep["passed"],
    })
    _plot(cfg, "norm_shapes", cfg.norm, out / "norms.svg")
    checks = {name: v <= rep["tolerance"] for name, v in rep["violations"].items()}
    checks["ellipticity"] = rep["ellipticity"] > 0
    return _finish(out, "norms", checks)


def cmd_distance(cfg: RunConfig, out: Path) -> int:
    dist = _distance(cfg)
    grid = dist.grid
    ref = distance_bruteforce(grid, cfg.norm, boundary_samples=int(cfg.tol("boundary_samples")))
    I = grid.interior
    sup = float(np.max(np.abs(dist.d.values[I] - ref.d.values[I])))
    eik = eikonal_report(dist)
    dist.to_csv(out / "distance.csv")
    write_json(out / "eikonal.json", {
        "command": "distance",
        "h": grid.h,
        "resolution": cfg.resolution,
        "oracle_sup_difference": sup,
        "oracle_tolerance": 2 * grid.h,
        "eikonal": eik,
        "inradius": dist.inradius,
        "band_mu": dist.band_mu,
        "interior_nodes": grid.n_interior,
    })
    _plot(cfg, "heat_map", grid, np.where(I, dist.d.values, np.nan), out / "distance.svg", r"$d_H$")
    return _finish(out, "distance", {"oracle_agreement": sup <= 2 * grid.h})


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    from .asymptotics import FitMode, InsufficientBand, calibrate_C_eps, fit_blowup_rate, sandwich_check, theory

    problem = cfg.problem()
    dist = _distance(cfg)
    tol = cfg.tol("newton_tol") or problem.default_tol()
    run = solve_blowup(problem, dist, cfg.M_schedule, stop_tol=cfg.tol("stop_tol"),
                       monitor_delta=cfg.tol("monitor_delta"), close_at_infinity=cfg.close_at_infinity,
                       newton_tol=tol)
    u = run.limit
    th = theory(problem)
    band = tuple(cfg.tol("fit_band")) if cfg.tol("fit_band") else None
    checks = {}
    try:
        fit = fit_blowup_rate(u, dist, problem.q, band, source=problem.source)
        fit_d = fit.to_dict()
        c0_rel = abs(fit.C0_fit - th["C0"]) / th["C0"]
        checks["fit_C0"] = c0_rel <= cfg.tol("fit_C0_rel")
        if fit.mode is FitMode.POWER:
            checks["fit_alpha"] = abs(fit.alpha_fit - th["alpha"]) <= cfg.tol("fit_alpha_rel") * th["alpha"]
    except InsufficientBand as exc:
        fit_d = {"error": str(exc)}
        checks["fit_band"] = False
    fit_d.update({"alpha_theory": 0.0 if th["mode"] is FitMode.LOG else th["alpha"], "C0_theory": th["C0"],
                  "regime": th["regime"]})
    write_json(out / "fit.json", fit_d)

    # the barrier clamp must fit inside the distance band of this domain
    delta0 = min(cfg.tol("delta0"), 0.8 * dist.band_mu)
    params, cal = calibrate_C_eps(problem, dist, cfg.tol("eps"), delta0)
    sandwich = sandwich_check(u, dist, params, problem.q)
    checks["sandwich"] = sandwich["violations_sub"] == 0 and sandwich["violations_super"] == 0
    checks["monotone"] = run.monotone_violation <= 2 * tol
    checks["stabilized"] = bool(run.stabilized) if cfg.gates.get("stabilized", True) else True
    grad = gradient_diagnostic(u, dist, problem)
    d = dist.d.values
    dist_col = np.where(dist.grid.interior, d, np.nan)
    u.to_csv(out / "solution.csv", {"d_H": dist_col})
    write_json(out / "run.json", {
        "command": "solve",
        "problem": problem.to_dict(),
        "resolution": cfg.resolution,
        "h": dist.grid.h,
        "newton_tol": tol,
        "blowup": run.to_dict(),
        "barrier": {"eps": params.eps, "delta0": params.delta0, "C_eps": params.C_eps, "C0": params.C0,
                    "alpha": params.alpha, "calibration": cal, "sandwich": sandwich},
        "gradient": grad,
        "checks": checks,
    })
    I = dist.grid.interior & (np.nan_to_num(d) >= 3 * dist.grid.h)
    _plot(cfg, "loglog_profile", d[I], u.values[I], th, out / "solution.svg", log_mode=th["mode"] is FitMode.LOG)
    return _finish(out, "solve", checks)


def cmd_ergodic(cfg: RunConfig, out: Path) -> int:
    from .ergodic import (ergodic_constant_uniqueness_probe, ergodic_continuation, exp_transform_check,
                          rayleigh_minimize)
    from .oracles import dense_dirichlet_eigen

    problem = cfg.problem()
    dist = _distance(cfg)
    grid = dist.grid
    tol = cfg.tol("newton_tol") or problem.default_tol()
    res = ergodic_continuation(problem, dist, cfg.lambda_schedule, newton_tol=tol)
    checks = {"continuation_converged": res.converged}
    payload = {"command": "ergodic", "problem": problem.to_dict(), "resolution": cfg.resolution,
               "continuation": res.to_dict()}
    res.v.to_csv(out / "v.csv")
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "lambda_u_x0"])
        for lam, t in res.lambda_trace:
            w.writerow([repr(float(lam)), repr(float(t))])
    oracle = None
    euclid_const = cfg.norm.family is Family.EUCLIDEAN and problem.source.C1 == 0
    if problem.q == 2.0:
        if euclid_const:
            oracle, _ = dense_dirichlet_eigen(grid, problem.source.f0, dist=dist)
            payload["oracle"] = {"u0": oracle, "boundary": "shortley_weller",
                                 "continuation_rel_error": abs(res.u0 - oracle) / abs(oracle)}
            checks["continuation_vs_oracle"] = abs(res.u0 - oracle) <= 0.02 * abs(oracle)
        if cfg.rayleigh:
            eig = rayleigh_minimize(cfg.norm, cfg.domain, dist, problem.source)
            eig.w.to_csv(out / "w.csv")
            tr = exp_transform_check(res.v, eig.w, dist)
            agree = abs(res.u0 - eig.u0) / abs(eig.u0)
            payload["rayleigh"] = eig.to_dict()
            payload["transform_check"] = tr
            payload["agreement"] = agree
            checks["rayleigh_converged"] = eig.converged
            checks["transform_check"] = tr["relative"] <= 0.05
            if oracle is not None:
                payload["oracle"]["rayleigh_rel_error"] = abs(eig.u0 - oracle) / abs(oracle)
                checks["rayleigh_vs_oracle"] = abs(eig.u0 - oracle) <= 0.02 * abs(oracle)
    if cfg.offsets:
        offs = [c * abs(res.u0) for c in cfg.offsets]
        probe = ergodic_constant_uniqueness_probe(problem, dist, res.u0, offs, res.v,
                                                  lam_floor=cfg.lambda_schedule[-1], newton_tol=tol)
        payload["uniqueness_probe"] = probe
        others = [p["residual"] for p in probe["probes"] if p["offset"] != 0.0]
        if probe["baseline"] is not None and others:
            checks["uniqueness"] = probe["baseline"] < min(others)
    payload["u0"] = res.u0
    payload["checks"] = checks
    write_json(out / "u0.json", payload)
    _plot(cfg, "trace_plot", res.lambda_trace, res.u0, out / "trace.svg", oracle=oracle)
    return _finish(out, "ergodic", checks)


# ---------------------------------------------------------------------------
# sweep


def _sweep_points(cfg: RunConfig):
    sw = cfg.sweep
    qs = sw.get("q", [cfg.q])
    norms = sw.get("norm", [cfg.norm.to_dict()])
    ress = sw.get("resolution", [cfg.resolution])
    for k, (q, nd, r) in enumerate(itertools.product(qs, norms, ress)):
        data = copy.deepcopy(cfg.raw)
        data.pop("sweep", None)
        data.pop("output", None)
        data["seed"] = cfg.seed
        data.setdefault("problem", {})
        data["problem"] = dict(data["problem"] or {}, q=float(q))
        data["norm"] = nd
        data["resolution"] = int(r)
        name = f"run_{k:03d}_q{float(q):g}_{nd['family']}_r{int(r)}"
        yield k, name, data


def _sweep_worker(args):
    command, data, out = args
    out = Path(out)
    try:
        code = _dispatch(command, parse_config(data), out)
    except ConfigError as exc:
        write_json(out / "failure.json", {"command": command, "error": str(exc)})
        code = EXIT_CONFIG
    except (NonConvergence, SingularJacobian, GeometryError, ValueError) as exc:
        write_json(out / "failure.json", {"command": command, "error": f"{type(exc).__name__}: {exc}"})
        code = EXIT_FAIL
    write_json(out / "done.json", {"exit_code": code})
    return code


SUMMARY_FIELDS = ["run", "q", "norm", "resolution", "exit_code", "alpha_fit", "alpha_theory", "C0_fit",
                  "C0_theory", "r_squared"]


def cmd_sweep(cfg: RunConfig, out: Path, workers: int = 1, resume: bool = False) -> int:
    if not cfg.sweep:
        raise ConfigError("sweep command needs a 'sweep' section")
    command = cfg.sweep.get("command", "solve")
    points = list(_sweep_points(cfg))
    for _, _, data in points:
        parse_config(data)
    jobs = []
    for _, name, data in points:
        run_dir = out / name
        if resume and (run_dir / "done.json").exists():
            continue
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        jobs.append((command, data, str(run_dir)))
    with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(_sweep_worker, jobs))
    rows = []
    for _, name, data in points:
        run_dir = out / name
        code = json.loads((run_dir / "done.json").read_text(encoding="utf-8"))["exit_code"]
        row = {"run": name, "q": repr(float(data["problem"]["q"])), "norm": data["norm"]["family"],
               "resolution": data["resolution"], "exit_code": code}
        fit_path = run_dir / "fit.json"
        if fit_path.exists():
            fit = json.loads(fit_path.read_text(encoding="utf-8"))
            for key in SUMMARY_FIELDS[5:]:
                v = fit.get(key)
                row[key] = "" if v is None else repr(v)
        rows.append(row)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n", restval="")
        w.writeheader()
        w.writerows(rows)
    failed = [r["run"] for r in rows if r["exit_code"] != EXIT_OK]
    if failed:
        write_json(out / "failure.json", {"command": "sweep", "failed_runs": failed})
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def _dispatch(command: str, cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if command == "ergodic" and cfg.source.regime(cfg.q) is not Regime.SUBCRITICAL:
        raise ConfigError("ergodic needs a source with beta < q' (or C1 = 0)")
    fn = {"norms": cmd_norms, "distance": cmd_distance, "solve": cmd_solve, "ergodic": cmd_ergodic}[command]
    return fn(cfg, out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="YAML or JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config 'output' or ./out)")
    common.add_argument("--seed", type=int, metavar="S", help="override the configuration seed")
    common.add_argument("--workers", type=int, default=1, metavar="N", help="parallel runs for sweep")
    common.add_argument("--resume", action="store_true", help="sweep: skip completed run directories")
    p = argparse.ArgumentParser(prog="finsler-blowup",
                                description="Boundary blow-up solutions of anisotropic viscous HJ equations.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.raw["seed"] = args.seed
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = Path(args.out or cfg.out_dir or "out")
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_json(Path(args.out) / "failure.json", {"command": args.command, "error": str(exc)})
        return EXIT_CONFIG
    try:
        if args.command == "sweep":
            code = cmd_sweep(cfg, out, args.workers, args.resume)
        else:
            code = _dispatch(args.command, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        write_json(out / "failure.json", {"command": args.command, "error": str(exc)})
        return EXIT_CONFIG
    except (NonConvergence, SingularJacobian, GeometryError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        write_json(out / "failure.json", {"command": args.command, "error": f"{type(exc).__name__}: {exc}"})
        return EXIT_FAIL
    status = "ok" if code == EXIT_OK else "invariant violation (see failure.json)"
    print(f"{args.command}: {status} -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
