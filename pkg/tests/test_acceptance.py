"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary at the end of the run.
"""
import filecmp
import math
import time

import numpy as np
import pytest
import yaml
from scipy.special import jn_zeros

from finsler_blowup.asymptotics import (
    calibrate_C_eps,
    fit_blowup_rate,
    sandwich_check,
    solve_C0,
)
from finsler_blowup.cli import main
from finsler_blowup.ergodic import ergodic_continuation, exp_transform_check, rayleigh_minimize
from finsler_blowup.geometry import (
    DomainSpec,
    ScalarField,
    build_grid,
    distance_bruteforce,
    distance_fast_march,
    eikonal_report,
)
from finsler_blowup.norms import NormSpec, identity_suite
from finsler_blowup.oracles import (
    dense_dirichlet_eigen,
    radial_to_field,
    scaling_check,
    shoot_radial,
    solve_radial,
)
from finsler_blowup.pde import (
    ProblemSpec,
    SourceSpec,
    comparison_check,
    gradient_diagnostic,
    solve_blowup,
    solve_truncated,
)

EUCLID = NormSpec.euclidean()
ELLIPSE = NormSpec.ellipse(np.diag([4.0, 1.0]))
DISK = DomainSpec.disk(1.0)
SCHEDULE = [10.0, 20.0, 40.0, 80.0, 160.0]
J01_SQ = jn_zeros(0, 1)[0] ** 2


@pytest.fixture(scope="module")
def disk128():
    return distance_fast_march(build_grid(DISK, 128), EUCLID)


@pytest.fixture(scope="module")
def blowup128(disk128):
    runs = {}

    def get(q):
        if q not in runs:
            p = ProblemSpec(EUCLID, DISK, q, 1.0)
            runs[q] = (p, solve_blowup(p, disk128, SCHEDULE))
        return runs[q]

    return get


# 1 -------------------------------------------------------------------------


@pytest.mark.parametrize("name,spec,tol", [
    ("Euclidean", EUCLID, 1e-8),
    ("Ellipse diag(4,1)", ELLIPSE, 1e-8),
    ("SmoothedLp p=4 eps=0.05", NormSpec.smoothed_lp(4.0, 0.05), 1e-6),
])
def test_01_norm_identities(report, name, spec, tol):
    rep = identity_suite(spec, samples=1000, seed=0)
    worst = max(rep["violations"].values())
    ok = rep["tolerance"] == tol and worst <= tol and rep["ellipticity"] > 0
    report(f"1 norm identities [{name}]", ok, f"max violation {worst:.2e} (tol {tol:.0e}) over 1000 inputs")
    assert ok


# 2 -------------------------------------------------------------------------


@pytest.mark.parametrize("nname,norm", [("Euclidean", EUCLID), ("Ellipse", ELLIPSE)])
@pytest.mark.parametrize("dname,dom", [("Disk", DISK), ("Ellipse(1,0.6)", DomainSpec.ellipse(1.0, 0.6))])
def test_02_distance_oracle(report, nname, norm, dname, dom):
    g128 = build_grid(dom, 128)
    assert g128.h == pytest.approx(1 / 64)
    fm = distance_fast_march(g128, norm)
    bf = distance_bruteforce(g128, norm)
    I = g128.interior
    sup = float(np.max(np.abs(fm.d.values[I] - bf.d.values[I])))
    med128 = eikonal_report(fm)["median"]
    med64 = eikonal_report(distance_fast_march(build_grid(dom, 64), norm))["median"]
    ratio = med64 / med128
    ok = sup <= 2 * g128.h and med128 <= 0.05 and ratio >= 1.5
    report(f"2 distance oracle [{nname} x {dname}]", ok,
           f"sup diff {sup / g128.h:.3f}h, median eikonal {med128:.4f}, refinement ratio {ratio:.2f}")
    assert ok


# 3 -------------------------------------------------------------------------


def test_03_constants(report):
    c2 = solve_C0(2.0, 0.0)
    c15 = solve_C0(1.5, 0.0)
    alpha = (2 - 1.5) / (1.5 - 1)
    cq = solve_C0(2.0, 2.0)
    ok = abs(c2 - 1) <= 1e-12 and abs(c15 - 4) <= 1e-12 and abs(alpha - 1) <= 1e-12 and cq == 2.0
    report("3 constants", ok, f"C0(2,0)={c2!r}, C0(1.5,0)={c15!r}, alpha={alpha!r}, C0(2,2)={cq!r}")
    assert ok


# 4 -------------------------------------------------------------------------


@pytest.mark.parametrize("q", [1.5, 2.0])
def test_04_monotone_scheme(report, blowup128, q):
    p, run = blowup128(q)
    tol = p.default_tol()
    mono = run.monotone_violation <= 2 * tol
    last = run.interior_deltas[-1]
    ok = mono and last < 1e-3
    deltas = ", ".join(f"{x:.2e}" for x in run.interior_deltas)
    report(f"4 monotone scheme [q={q}]", ok,
           f"max decrease {run.monotone_violation:.1e} (tol {2 * tol:.0e}); interior changes on "
           f"Omega_8h: [{deltas}] (need last < 1e-3)")
    assert mono, "ordering u_M <= u_N violated"
    assert last < 1e-3, "interior did not stabilize along the schedule"


# 5 -------------------------------------------------------------------------


@pytest.mark.parametrize("q", [1.5, 2.0])
def test_05_blowup_rate(report, blowup128, disk128, q):
    p, run = blowup128(q)
    h = disk128.grid.h
    fit = fit_blowup_rate(run.limit, disk128, q, band=(5 * h, 0.2))
    if q == 2.0:
        ok = abs(fit.C0_fit - 1.0) <= 0.15
        detail = f"log-mode C0 {fit.C0_fit:.4f} (theory 1, tol 15%)"
    else:
        ok = abs(fit.alpha_fit - 1.0) <= 0.10 and abs(fit.C0_fit - 4.0) <= 0.15 * 4.0
        detail = f"alpha {fit.alpha_fit:.4f} (theory 1, tol 10%), C0 {fit.C0_fit:.3f} (theory 4, tol 15%)"
    report(f"5 blow-up rate [q={q}]", ok, detail + f", band [5h, 0.2], R2 {fit.r_squared:.5f}")
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.mark.parametrize("q", [1.5, 2.0])
def test_06_barrier_sandwich(report, blowup128, disk128, q):
    p, run = blowup128(q)
    params, info = calibrate_C_eps(p, disk128, 0.5, 0.2)
    out = sandwich_check(run.limit, disk128, params, q)
    bad = out["violations_sub"] + out["violations_super"]
    ok = bad == 0 and out["nodes"] > 0 and not info["capped"]
    report(f"6 barrier sandwich [q={q}]", ok,
           f"{bad} violations over {out['nodes']} nodes on 3h <= d <= 0.2, C_eps {params.C_eps:.1f}")
    assert ok


# 7 -------------------------------------------------------------------------


@pytest.mark.parametrize("nname,norm", [("Euclidean", EUCLID), ("Ellipse", ELLIPSE)])
def test_07_radial_crosscheck(report, nname, norm):
    q, lam, K = 1.5, 1e-3, 1.0
    dom = DomainSpec.wulff(norm, 1.0)
    grid = build_grid(dom, 128)
    dist = distance_fast_march(grid, norm)
    u, _ = solve_truncated(ProblemSpec(norm, dom, q, lam, SourceSpec(K)), dist, 0.0)
    sol = solve_radial(2, q, K, nodes=4000, lam=lam)
    ref = radial_to_field(sol, norm, grid)
    I = grid.interior
    err = float(np.max(np.abs(u.values[I] - ref.values[I])) / np.max(np.abs(ref.values[I])))
    shot = shoot_radial(2, q, K, lam=lam)
    rel = abs(sol.U[0] - shot) / abs(shot)
    ok = err <= 0.05 and rel <= 1e-5
    report(f"7 radial cross-check [{nname}]", ok,
           f"2-D vs radial sup error {err:.2e} (tol 5%), BVP vs shooting U(0) {rel:.1e} (tol 1e-5)")
    assert ok


# 8 -------------------------------------------------------------------------


def test_08_ergodic_constant(report, disk128):
    p = ProblemSpec(EUCLID, DISK, 2.0, 1.0, SourceSpec(0.0))
    t0 = time.perf_counter()
    res = ergodic_continuation(p, disk128)
    runtime = time.perf_counter() - t0
    eig = rayleigh_minimize(EUCLID, DISK, disk128, p.source)
    oracle, _ = dense_dirichlet_eigen(disk128.grid, dist=disk128)
    # the oracle's own refinement towards j01^2
    coarse = distance_fast_march(build_grid(DISK, 64), EUCLID)
    oracle64, _ = dense_dirichlet_eigen(coarse.grid, dist=coarse)
    stair128, _ = dense_dirichlet_eigen(disk128.grid, boundary="staircase")
    stair64, _ = dense_dirichlet_eigen(coarse.grid, boundary="staircase")
    richardson = 2 * stair128 - stair64  # the staircase error is O(h)
    tr = exp_transform_check(res.v, eig.w, disk128, delta=0.1)
    e_cont = abs(res.u0 - oracle) / oracle
    e_ray = abs(eig.u0 - oracle) / oracle
    e_orc = abs(oracle - J01_SQ) / J01_SQ
    ok = e_cont <= 0.02 and e_ray <= 0.02 and e_orc <= 0.01 and tr["relative"] <= 0.05 and runtime <= 300
    report("8 ergodic constant", ok,
           f"continuation {res.u0:.6f} ({e_cont:.1e}), Rayleigh {eig.u0:.6f} ({e_ray:.1e}) vs oracle "
           f"{oracle:.6f}; oracle vs j01^2 {e_orc:.1e} (64: {oracle64:.5f}); staircase 64/128 "
           f"{stair64:.4f}/{stair128:.4f} -> Richardson {richardson:.4f}; transform {tr['relative']:.1e}; "
           f"continuation {runtime:.1f}s")
    assert ok


# 9 -------------------------------------------------------------------------


def test_09_gradient_bound(report, blowup128, disk128):
    p, run = blowup128(1.5)
    s128 = gradient_diagnostic(run.limit, disk128, p)["sup"]
    d64 = distance_fast_march(build_grid(DISK, 64), EUCLID)
    u64 = solve_blowup(p, d64, SCHEDULE).limit
    s64 = gradient_diagnostic(u64, d64, p)["sup"]
    ratio = max(s64, s128) / min(s64, s128)
    ok = ratio <= 2.0
    report("9 gradient bound", ok, f"sup |grad u| d^(1/(q-1)): 64 -> {s64:.3f}, 128 -> {s128:.3f}, "
                                   f"ratio {ratio:.3f} (tol 2)")
    assert ok


# 10 ------------------------------------------------------------------------


def test_10_comparison_principle(report):
    dist = distance_fast_march(build_grid(DISK, 64), EUCLID)
    pairs = [
        (1.5, SourceSpec(0.0), SourceSpec(1.0)),
        (2.0, SourceSpec(0.0, 0.5, 1.0), SourceSpec(0.0, 1.0, 1.0)),
        (1.5, SourceSpec(-1.0), SourceSpec(0.0, 0.2, 2.0)),
    ]
    worst, ordered = 0.0, True
    for q, fa, fb in pairs:
        out = comparison_check(ProblemSpec(EUCLID, DISK, q, 1.0, fa), ProblemSpec(EUCLID, DISK, q, 1.0, fb),
                               dist, 20.0)
        ordered &= out["ordered"]
        worst = max(worst, out["max_violation"] / out["tol"])
    p = ProblemSpec(EUCLID, DISK, 1.5, 1.0, SourceSpec(0.5))
    tol = p.default_tol()
    I = dist.grid.interior
    ua, _ = solve_truncated(p, dist, 20.0, newton_tol=tol)
    X, Y = np.moveaxis(dist.grid.points(), -1, 0)
    init = ScalarField(dist.grid, np.where(I, 20.0 + 5.0 * np.sin(3 * X) * np.cos(2 * Y), np.nan), I)
    ub, _ = solve_truncated(p, dist, 20.0, init, newton_tol=tol)
    flat = ScalarField(dist.grid, np.where(I, -5.0, np.nan), I)
    uc, _ = solve_truncated(p, dist, 20.0, flat, newton_tol=tol)
    spread = max(np.max(np.abs(ua.values[I] - ub.values[I])), np.max(np.abs(ua.values[I] - uc.values[I])))
    ok = ordered and spread <= 10 * tol
    report("10 comparison principle", ok,
           f"3 ordered pairs, worst excess {worst:.2f} x tol (allowed 2); identical sources from 3 "
           f"starts agree to {spread:.1e} (tol {10 * tol:.0e})")
    assert ok


# 11 ------------------------------------------------------------------------


def test_11_scaling_identity(report):
    out = scaling_check(EUCLID, 1.5, 1.0, 1.0, 0.5, 64, x0=(0.3, -0.2))
    out_inf = scaling_check(EUCLID, 1.5, 1.0, 1.0, 0.5, 64, x0=(0.3, -0.2), M=math.inf)
    ok = out["mismatch"] <= 0.05 and out_inf["mismatch"] <= 0.05
    report("11 scaling identity", ok, f"r=0.5 mismatch {out['mismatch']:.1e} (M=0), "
                                      f"{out_inf['mismatch']:.1e} (M=inf), tol 5%")
    assert ok


# 12 ------------------------------------------------------------------------


def _tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_tree_identical(a / d, b / d) for d in cmp.common_dirs)


def test_12_determinism(report, tmp_path):
    cfg = {
        "norm": {"family": "Euclidean"},
        "domain": {"shape": "Disk", "radius": 1.0},
        "resolution": 48,
        "problem": {"q": 2.0, "lambda": 1.0},
        "schedules": {"M": [10, 20, 40]},
        "tolerances": {"fit_band": [0.13, 0.3]},
        "seed": 7,
        "sweep": {
            "command": "solve",
            "q": [1.5, 2.0],
            "norm": [{"family": "Euclidean"}, {"family": "Ellipse", "params": [2.0, 0.0, 0.0, 1.0]}],
        },
    }
    path = tmp_path / "sweep.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    main(["sweep", "--config", str(path), "--out", str(tmp_path / "w1"), "--workers", "1", "--seed", "7"])
    main(["sweep", "--config", str(path), "--out", str(tmp_path / "w4"), "--workers", "4", "--seed", "7"])
    runs = [d for d in (tmp_path / "w1").iterdir() if d.is_dir()]
    ok = len(runs) == 4 and _tree_identical(tmp_path / "w1", tmp_path / "w4")
    report("12 determinism", ok, f"{len(runs)} runs; outputs with 1 and 4 workers byte-identical: {ok}")
    assert ok
