"""Boundary blow-up constants, barrier functions and rate fitting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.optimize import brentq

from .geometry import DistanceField, ScalarField, extended_distance
from .pde import ProblemSpec, Regime, SourceSpec, stencil_residual

__all__ = [
    "FitMode",
    "BarrierKind",
    "BlowupFit",
    "BarrierParams",
    "InsufficientBand",
    "solve_C0",
    "solve_C0_fast",
    "theory",
    "barrier_field",
    "calibrate_C_eps",
    "fit_blowup_rate",
    "default_band",
    "sandwich_check",
]

C_EPS_CAP = 1e6


class FitMode(str, Enum):
    POWER = "PowerLaw"
    LOG = "Logarithmic"


class BarrierKind(str, Enum):
    SUB = "Sub"
    SUPER = "Super"


class InsufficientBand(ValueError):
    pass


@dataclass
class BlowupFit:
    alpha_fit: float
    C0_fit: float
    band: tuple
    r_squared: float
    mode: FitMode
    count: int = 0

    def to_dict(self):
        return {
            "alpha_fit": self.alpha_fit,
            "C0_fit": self.C0_fit,
            "band": list(self.band),
            "r_squared": self.r_squared,
            "mode": self.mode.value,
            "count": self.count,
        }


@dataclass(frozen=True)
class BarrierParams:
    eps: float
    delta: float
    C_eps: float
    delta0: float
    C0: float
    alpha: float

    def __post_init__(self):
        if not 0 <= self.delta <= self.delta0:
            raise ValueError("need 0 <= delta <= delta0")
        if not self.C0 > 0:
            raise ValueError("C0 must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    def with_C_eps(self, c: float) -> "BarrierParams":
        return replace(self, C_eps=float(c))


def solve_C0(q: float, C1: float = 0.0) -> float:
    """Positive root of α^q C^q − α C/(q−1) − C₁ = 0 (q < 2) or
    C² − C − C₁ = 0 (q = 2), with α = (2−q)/(q−1)."""
    if not 1.0 < q <= 2.0:
        raise ValueError("q must lie in (1, 2]")
    if C1 < 0:
        raise ValueError("C1 must be nonnegative")
    if q == 2.0:
        return (1.0 + math.sqrt(1.0 + 4.0 * C1)) / 2.0
    a = (2.0 - q) / (q - 1.0)
    base = (a + 1.0) ** (1.0 / (q - 1.0)) / a
    if C1 == 0:
        return base

    # with C = base·(1 + y) the equation becomes (1+y)(1+y)^{q−1} − (1+y) = ε,
    # written with log1p/expm1 so that large bases keep full precision
    eps = C1 * (q - 1.0) / (a * base)

    def g(y):
        return (1.0 + y) * math.expm1((q - 1.0) * math.log1p(y)) - eps

    hi = 1.0
    while g(hi) <= 0:
        hi *= 2.0
    y = brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return base * (1.0 + y)


def solve_C0_fast(q: float, C1: float, beta: float) -> tuple[float, float]:
    """(C₀, exponent) for f ~ C₁ d^{−β} with β > q′, from the balance
    H(∇u)^q ≈ f: exponent β/q − 1 and C₀ = C₁^{1/q}/(β/q − 1)."""
    qp = q / (q - 1.0)
    if not beta > qp:
        raise ValueError(f"beta must exceed q' = {qp:g}")
    if not C1 > 0:
        raise ValueError("C1 must be positive")
    e = beta / q - 1.0
    return C1 ** (1.0 / q) / e, e


def theory(problem: ProblemSpec) -> dict:
    """Leading-order boundary behaviour predicted for the problem's data."""
    q, src = problem.q, problem.source
    reg = src.regime(q)
    if reg is Regime.FAST:
        C0, e = solve_C0_fast(q, src.C1, src.beta)
        return {"mode": FitMode.POWER, "alpha": e, "C0": C0, "regime": reg.value}
    C1 = src.C1 if reg is Regime.CRITICAL else 0.0
    C0 = solve_C0(q, C1)
    mode = FitMode.LOG if q == 2.0 else FitMode.POWER
    return {"mode": mode, "alpha": problem.alpha, "C0": C0, "regime": reg.value}


def _profile(x, alpha):
    if alpha == 0:
        return -np.log(x)
    return x ** (-alpha)


def barrier_field(params: BarrierParams, d_ext: ScalarField, kind: BarrierKind | str, q: float) -> ScalarField:
    """Sub: (C₀−ε)(d+δ)^{−α} − C_ε on {d ≥ −δ};  Super: (C₀+ε)(d−δ)^{−α} + C_ε
    on {d > δ}.  For q = 2 the power is replaced by −log."""
    kind = BarrierKind(kind)
    alpha = 0.0 if q == 2.0 else params.alpha
    d = d_ext.values
    if kind is BarrierKind.SUB:
        arg = d + params.delta
        coef, shift = params.C0 - params.eps, -params.C_eps
    else:
        arg = d - params.delta
        coef, shift = params.C0 + params.eps, params.C_eps
    ok = d_ext.mask & np.isfinite(arg) & (arg > 0)
    if not ok.any():
        raise ValueError("barrier evaluation set is empty")
    vals = np.full(d.shape, np.nan)
    vals[ok] = coef * _profile(arg[ok], alpha) + shift
    return ScalarField(d_ext.grid, vals, ok)


def _calibration_mask(dist: DistanceField, min_d: float) -> np.ndarray:
    g = dist.grid
    return g.interior & (np.nan_to_num(dist.d.values, nan=-1.0) >= min_d)


def calibrate_C_eps(problem: ProblemSpec, dist: DistanceField, eps: float, delta0: float,
                    delta: float = 0.0, min_d: float | None = None) -> tuple[BarrierParams, dict]:
    """Smallest C_ε making the discrete residual of the Super barrier ≥ 0 and
    that of the Sub barrier ≤ 0 on the interior nodes with d_H ≥ min_d
    (default 3h).

    Both barriers depend on C_ε only through the additive constant, and the
    residual of u + c is the residual of u plus λc, so the smallest
    admissible value is max(−min R_super, max R_sub)/λ, computed directly.
    The result is clipped at zero and capped at 1e6.
    """
    if not problem.lam > 0:
        raise ValueError("calibration needs lambda > 0")
    th = theory(problem)
    alpha = 0.0 if th["mode"] is FitMode.LOG else th["alpha"]
    base = BarrierParams(eps, delta, 0.0, delta0, th["C0"], alpha)
    d_ext = extended_distance(dist, delta0)
    min_d = 3 * dist.grid.h if min_d is None else min_d
    m = _calibration_mask(dist, min_d)
    worst = {}
    for kind in (BarrierKind.SUPER, BarrierKind.SUB):
        w = barrier_field(base, d_ext, kind, problem.q)
        R = stencil_residual(problem, np.where(w.mask, w.values, np.nan), dist)
        sel = m & np.isfinite(R)
        if not sel.any():
            raise ValueError("no nodes available for calibration")
        worst[kind] = float(np.min(R[sel])) if kind is BarrierKind.SUPER else float(np.max(R[sel]))
    need = max(0.0, -worst[BarrierKind.SUPER], worst[BarrierKind.SUB]) / problem.lam
    capped = need > C_EPS_CAP
    info = {
        "C_eps_required": need,
        "capped": capped,
        "super_min_residual": worst[BarrierKind.SUPER],
        "sub_max_residual": worst[BarrierKind.SUB],
        "min_d": min_d,
    }
    return base.with_C_eps(min(need, C_EPS_CAP)), info


def sandwich_check(u: ScalarField, dist: DistanceField, params: BarrierParams, q: float,
                   min_d: float | None = None) -> dict:
    """Count nodes on min_d ≤ d_H ≤ δ₀ where u leaves [Sub, Super]."""
    min_d = 3 * dist.grid.h if min_d is None else min_d
    d_ext = extended_distance(dist, params.delta0)
    lo = barrier_field(params, d_ext, BarrierKind.SUB, q)
    hi = barrier_field(params, d_ext, BarrierKind.SUPER, q)
    d = np.nan_to_num(dist.d.values, nan=-1.0)
    band = dist.grid.interior & (d >= min_d) & (d <= params.delta0) & lo.mask & hi.mask
    below = lo.values[band] - u.values[band]
    above = u.values[band] - hi.values[band]
    return {
        "nodes": int(band.sum()),
        "violations_sub": int(np.sum(below > 0)),
        "violations_super": int(np.sum(above > 0)),
        "worst_sub": float(below.max()) if below.size else 0.0,
        "worst_super": float(above.max()) if above.size else 0.0,
    }


def default_band(dist: DistanceField, delta0: float | None = None) -> tuple[float, float]:
    h = dist.grid.h
    hi = 0.2 * dist.inradius
    if delta0 is not None:
        hi = min(hi, delta0)
    return 5 * h, hi


def fit_blowup_rate(u: ScalarField, dist: DistanceField, q: float, band=None, *,
                    mode: FitMode | str | None = None, source: SourceSpec | None = None,
                    min_count: int = 30) -> BlowupFit:
    """Least-squares boundary rate on the band d_min ≤ d_H ≤ d_max.

    PowerLaw regresses log u on log d_H (slope −α, intercept log C₀).
    Logarithmic regresses u on log(1/d_H) (slope C₀, α = 0).  The mode is
    logarithmic exactly when q = 2 and the source is not in the fast regime,
    unless overridden.
    """
    h = dist.grid.h
    lo, hi = default_band(dist) if band is None else band
    if lo < 3 * h - 1e-12:
        raise InsufficientBand("band must start at d_H >= 3h")
    if mode is None:
        fast = source is not None and source.regime(q) is Regime.FAST
        mode = FitMode.LOG if (q == 2.0 and not fast) else FitMode.POWER
    mode = FitMode(mode)
    d = np.nan_to_num(dist.d.values, nan=-1.0)
    sel = dist.grid.interior & (d >= lo) & (d <= hi) & u.mask & np.isfinite(u.values)
    if mode is FitMode.POWER:
        sel &= u.values > 0
    if sel.sum() < min_count:
        raise InsufficientBand(f"only {int(sel.sum())} nodes in band [{lo:.4g}, {hi:.4g}]")
    dv, uv = d[sel], u.values[sel]
    if mode is FitMode.POWER:
        x, y = np.log(dv), np.log(uv)
    else:
        x, y = np.log(1.0 / dv), uv
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ np.array([slope, icpt])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - fit) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    r2 = min(max(r2, 0.0), 1.0)
    if mode is FitMode.POWER:
        alpha_fit, C0_fit = -float(slope), float(np.exp(icpt))
    else:
        alpha_fit, C0_fit = 0.0, float(slope)
    return BlowupFit(alpha_fit, C0_fit, (float(lo), float(hi)), r2, mode, int(sel.sum()))
