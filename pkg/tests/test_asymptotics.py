import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finsler_blowup.asymptotics import (
    BarrierKind,
    BarrierParams,
    FitMode,
    InsufficientBand,
    barrier_field,
    calibrate_C_eps,
    fit_blowup_rate,
    sandwich_check,
    solve_C0,
    solve_C0_fast,
    theory,
)
from finsler_blowup.geometry import ScalarField, extended_distance
from finsler_blowup.norms import NormSpec
from finsler_blowup.pde import ProblemSpec, SourceSpec, solve_truncated


def test_closed_form_constants():
    assert solve_C0(2.0, 0.0) == 1.0
    assert solve_C0(1.5, 0.0) == pytest.approx(4.0, abs=1e-12)
    assert solve_C0(2.0, 2.0) == 2.0
    with pytest.raises(ValueError):
        solve_C0(2.5)
    with pytest.raises(ValueError):
        solve_C0(1.5, -1.0)


@settings(max_examples=60, deadline=None)
@given(q=st.floats(1.05, 1.95), C1=st.floats(0.0, 50.0))
def test_C0_solves_balance(q, C1):
    a = (2 - q) / (q - 1)
    C = solve_C0(q, C1)
    assert C > 0
    assert (a * C) ** q - a * C / (q - 1) - C1 == pytest.approx(0.0, abs=1e-9 * (1 + C1 + C**q))


def test_fast_regime():
    C, e = solve_C0_fast(1.5, 8.0, 4.5)
    assert e == pytest.approx(2.0)
    assert C == pytest.approx(8.0 ** (1 / 1.5) / 2.0)
    with pytest.raises(ValueError):
        solve_C0_fast(1.5, 1.0, 3.0)


def test_theory_modes(disk32):
    e = NormSpec.euclidean()
    dom = disk32.grid.domain
    assert theory(ProblemSpec(e, dom, 2.0))["mode"] is FitMode.LOG
    th = theory(ProblemSpec(e, dom, 1.5))
    assert th["mode"] is FitMode.POWER and th["alpha"] == pytest.approx(1.0)
    assert theory(ProblemSpec(e, dom, 2.0, 1.0, SourceSpec(0, 1.0, 3.0)))["mode"] is FitMode.POWER


def _synthetic(dist, alpha, C0, log=False):
    d = dist.d.values
    I = dist.grid.interior
    vals = np.where(I, C0 * np.log(1 / d) if log else C0 * d ** (-alpha), np.nan)
    return ScalarField(dist.grid, vals, I)


def test_fit_recovers_exact_power(disk64):
    fit = fit_blowup_rate(_synthetic(disk64, 1.0, 4.0), disk64, 1.5)
    assert fit.alpha_fit == pytest.approx(1.0, abs=1e-10)
    assert fit.C0_fit == pytest.approx(4.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_recovers_exact_log(disk64):
    fit = fit_blowup_rate(_synthetic(disk64, 0.0, 1.0, log=True), disk64, 2.0)
    assert fit.mode is FitMode.LOG
    assert fit.C0_fit == pytest.approx(1.0, rel=1e-10)


def test_fit_band_checks(disk64):
    u = _synthetic(disk64, 1.0, 4.0)
    with pytest.raises(InsufficientBand):
        fit_blowup_rate(u, disk64, 1.5, band=(disk64.grid.h, 0.2))
    with pytest.raises(InsufficientBand):
        fit_blowup_rate(u, disk64, 1.5, band=(0.15, 0.151))


def test_barrier_params_validation():
    with pytest.raises(ValueError):
        BarrierParams(0.5, 0.3, 0.0, 0.2, 1.0, 1.0)
    with pytest.raises(ValueError):
        BarrierParams(0.5, 0.0, 0.0, 0.2, 0.0, 1.0)


def test_barrier_shapes(disk64):
    ext = extended_distance(disk64, 0.2)
    bp = BarrierParams(0.5, 0.05, 1.0, 0.2, 4.0, 1.0)
    sub = barrier_field(bp, ext, BarrierKind.SUB, 1.5)
    sup = barrier_field(bp, ext, "Super", 1.5)
    both = sub.mask & sup.mask
    assert np.all(sub.values[both] < sup.values[both])
    # the Super barrier is only defined where d > δ
    assert not sup.mask[disk64.grid.interior & (disk64.d.values <= 0.05)].any()


@pytest.mark.parametrize("q", [1.5, 2.0])
def test_calibrated_sandwich(disk64, q):
    e = NormSpec.euclidean()
    p = ProblemSpec(e, disk64.grid.domain, q, 1.0)
    params, info = calibrate_C_eps(p, disk64, 0.5, 0.2)
    assert params.C_eps == pytest.approx(info["C_eps_required"])
    u, _ = solve_truncated(p, disk64, math.inf)
    out = sandwich_check(u, disk64, params, q)
    assert out["nodes"] > 0
    assert out["violations_sub"] == 0 and out["violations_super"] == 0
