"""Vanishing-discount limit: the ergodic constant u₀ and its eigenvalue form."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import DistanceField, DomainSpec, ScalarField
from .norms import NormSpec, estimate_constants
from .oracles import dense_dirichlet_eigen
from .pde import (
    NonConvergence,
    ProblemSpec,
    Regime,
    SourceSpec,
    _discretization,
    solve_blowup,
    solve_truncated,
)

__all__ = [
    "Method",
    "ErgodicResult",
    "EigenResult",
    "RegimeError",
    "default_x0",
    "ergodic_continuation",
    "rayleigh_minimize",
    "rayleigh_quotient",
    "exp_transform_check",
    "ergodic_constant_uniqueness_probe",
]

DEFAULT_SCHEDULE = tuple(2.0**-k for k in range(13))


class Method(str, Enum):
    CONTINUATION = "Continuation"
    RAYLEIGH = "Rayleigh"


class RegimeError(ValueError):
    pass


@dataclass
class ErgodicResult:
    u0: float
    v: ScalarField
    x0: int
    lambda_trace: list
    method: Method = Method.CONTINUATION
    agreement: float | None = None
    converged: bool = True
    u0_raw: float = float("nan")
    eqerg_residual: float = float("nan")
    gradient_sups: list = field(default_factory=list)
    lam_v_sup: list = field(default_factory=list)
    u_last: ScalarField | None = None

    def to_dict(self):
        return {
            "u0": self.u0,
            "u0_raw": self.u0_raw,
            "method": self.method.value,
            "trace": [[float(a), float(b)] for a, b in self.lambda_trace],
            "agreement": self.agreement,
            "converged": self.converged,
            "x0": int(self.x0),
            "eqerg_residual": self.eqerg_residual,
            "gradient_sups": [float(g) for g in self.gradient_sups],
            "lam_v_sup": [float(g) for g in self.lam_v_sup],
        }


@dataclass
class EigenResult:
    u0: float
    w: ScalarField
    rayleigh_history: list
    iterations: int = 0
    converged: bool = False
    projections: int = 0
    projections_tail: int = 0

    def to_dict(self):
        return {
            "u0": self.u0,
            "method": Method.RAYLEIGH.value,
            "iterations": self.iterations,
            "converged": self.converged,
            "projections": self.projections,
            "projections_tail": self.projections_tail,
            "rayleigh_history": [float(r) for r in self.rayleigh_history],
        }


def default_x0(dist: DistanceField) -> int:
    """Flat index of the Interior node farthest from the boundary."""
    d = np.where(dist.grid.interior, dist.d.values, -np.inf)
    return int(np.argmax(d))


def _extrapolate_zero(lams, vals, order):
    k = min(order + 1, len(lams))
    x = np.asarray(lams[-k:], dtype=float)
    y = np.asarray(vals[-k:], dtype=float)
    if k == 1:
        return float(y[0])
    return float(np.polyval(np.polyfit(x, y, k - 1), 0.0))


def _grad_sup(u: ScalarField, dist: DistanceField, delta: float) -> float:
    h = dist.grid.h
    v = np.where(dist.grid.interior, u.values, np.nan)
    gx = np.full(v.shape, np.nan)
    gy = np.full(v.shape, np.nan)
    gx[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * h)
    gy[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * h)
    g = np.hypot(gx, gy)
    m = dist.grid.interior & (np.nan_to_num(dist.d.values, nan=-1) > delta) & np.isfinite(g)
    return float(np.max(g[m]))


def ergodic_continuation(problem: ProblemSpec, dist: DistanceField, lambda_schedule=DEFAULT_SCHEDULE,
                         x0: int | None = None, *, newton_tol: float | None = None,
                         probe_delta: float = 0.1, start_schedule=(10.0, 20.0, 40.0, 80.0, 160.0),
                         max_refine: int = 4) -> ErgodicResult:
    """λ → 0 continuation of the blow-up solutions u_λ.

    The first λ is reached through the increasing-datum sweep followed by the
    M = ∞ solve; each later λ solves the M = ∞ problem directly, seeded with
    v_λ + (predicted λu_λ(x₀))/λ.  u₀ is the value at λ = 0 of the quadratic
    through the last three trace points (λ, λu_λ(x₀)).
    """
    if problem.source.regime(problem.q) is not Regime.SUBCRITICAL:
        raise RegimeError("the ergodic limit needs f = o(d^{-q'}) (beta < q' or C1 = 0)")
    lams = [float(x) for x in lambda_schedule]
    if any(b >= a for a, b in zip(lams, lams[1:])) or min(lams) <= 0:
        raise ValueError("lambda schedule must be positive and strictly decreasing")
    grid = dist.grid
    x0 = default_x0(dist) if x0 is None else int(x0)
    I = grid.interior
    tol = problem.default_tol() if newton_tol is None else newton_tol

    first = problem.replace(lam=lams[0])
    run = solve_blowup(first, dist, start_schedule, newton_tol=tol)
    u = run.limit
    trace = [(lams[0], lams[0] * float(u.values.flat[x0]))]
    grads = [_grad_sup(u, dist, probe_delta)]
    vals = [u]

    def solve_at(lam, u_prev, lam_prev, depth=0):
        # linear prediction in λ of λu_λ(x0)
        t_pred = trace[-1][1]
        if len(trace) > 1:
            (l1, t1), (l2, t2) = trace[-2], trace[-1]
            t_pred = t2 + (t2 - t1) / (l2 - l1) * (lam - l2)
        v_prev = u_prev.values - u_prev.values.flat[x0]
        guess = ScalarField(grid, np.where(I, v_prev + t_pred / lam, np.nan), I.copy())
        try:
            return solve_truncated(problem.replace(lam=lam), dist, math.inf, guess, newton_tol=tol)[0]
        except NonConvergence:
            if depth >= max_refine:
                raise
            mid = math.sqrt(lam * lam_prev)
            u_mid = solve_at(mid, u_prev, lam_prev, depth + 1)
            return solve_at(lam, u_mid, mid, depth + 1)

    for lam_prev, lam in zip(lams, lams[1:]):
        u = solve_at(lam, u, lam_prev)
        trace.append((lam, lam * float(u.values.flat[x0])))
        grads.append(_grad_sup(u, dist, probe_delta))
        vals.append(u)

    ts = [t for _, t in trace]
    u0 = _extrapolate_zero(lams, ts, 2)
    diffs = np.abs(np.diff(ts))
    tail = diffs[-4:] if len(diffs) >= 4 else diffs
    converged = bool(np.all(np.diff(tail) < 0)) if len(tail) > 1 else True
    lam_last = lams[-1]
    vfield = np.where(I, u.values - u.values.flat[x0], np.nan)
    v = ScalarField(grid, vfield, I.copy())
    mon = I & (np.nan_to_num(dist.d.values, nan=-1) > probe_delta)
    lam_v = [float(l * np.max(np.abs(w.values[mon] - w.values.flat[x0]))) for l, w in zip(lams, vals)]
    # The discrete equation for u_λ holds exactly, so applying the same
    # discrete operator to v with the constant u₀ leaves λu_λ(x) − u₀.
    eqerg = float(np.max(np.abs(lam_last * u.values[mon] - u0)))
    return ErgodicResult(u0, v, x0, trace, Method.CONTINUATION, None, converged, ts[-1], eqerg, grads,
                         lam_v, u)


# ---------------------------------------------------------------------------
# eigenvalue route (q = 2)


def rayleigh_quotient(psi: np.ndarray, D, norm: NormSpec, f: np.ndarray) -> float:
    """(Σ ψ·(−Δ_H ψ) + Σ fψ²) / Σ ψ² over Interior nodes, zero boundary data."""
    Lpsi, _ = D.divergence(norm, psi, 0.0)
    return float((psi @ Lpsi + np.sum(f * psi * psi)) / (psi @ psi))


def rayleigh_minimize(norm: NormSpec, domain: DomainSpec, dist: DistanceField, f: SourceSpec,
                      init: ScalarField | None = None, *, max_iter: int = 500, tol: float = 1e-12,
                      max_halvings: int = 30) -> EigenResult:
    """Minimize the discrete Rayleigh quotient over fields vanishing on ∂Ω.

    The numerator uses the solver's own operator, Σ ψ·(−Δ_H ψ)·h², which for
    the conservative flux scheme is the discrete ∫H(∇ψ)².  Each step moves
    along the preconditioned residual −P⁻¹(−Δ_H ψ + fψ − Rψ), where P is the
    linearized operator at the initial field, then renormalizes to ∫ψ² = 1;
    a backtracking search keeps the quotient nonincreasing.  Negative nodal
    values are projected to a small positive floor and counted.
    """
    grid = dist.grid
    h = grid.h
    D = _discretization(grid, dist, "ghost")
    I = grid.interior
    fv = f.evaluate(D.gather(dist.d.values), h)
    if init is None:
        _, init = dense_dirichlet_eigen(grid, D.scatter(fv, 0.0), dist=dist)
    psi = np.abs(D.gather(init.values))
    psi = np.maximum(psi, 1e-12 * psi.max())
    psi /= math.sqrt(h * h * psi @ psi)

    gamma = estimate_constants(norm, 512).gamma_est
    _, g = D.divergence(norm, psi, 0.0)
    JL, _ = D.divergence_jacobian(norm, g, 1e-12, gamma)
    shift = float(fv.min())
    P = splu((JL + sp.diags(fv - shift) + 1e-10 * sp.identity(D.n)).tocsc())

    R = rayleigh_quotient(psi, D, norm, fv)
    hist = [R]
    proj_iters = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Lpsi, _ = D.divergence(norm, psi, 0.0)
        grad = Lpsi + fv * psi - R * psi
        if np.max(np.abs(grad)) <= tol * max(1.0, abs(R)) * 1e2:
            converged = True
            break
        d = -P.solve(grad)
        t = 1.0
        accepted = False
        for _ in range(max_halvings):
            cand = psi + t * d
            neg = cand <= 0
            cand = np.where(neg, 1e-12 * np.max(np.abs(cand)), cand)
            cand /= math.sqrt(h * h * cand @ cand)
            Rc = rayleigh_quotient(cand, D, norm, fv)
            if Rc <= R:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = abs(hist[-1] - R) <= 1e-10 * max(1.0, abs(R)) or np.max(np.abs(grad)) < 1e-6
            break
        proj_iters.append(int(neg.sum()))
        done = R - Rc <= tol * max(1.0, abs(R))
        psi, R = cand, Rc
        hist.append(R)
        if done:
            converged = True
            break
    w = ScalarField(grid, D.scatter(psi), I.copy())
    return EigenResult(R, w, hist, it, converged, int(sum(proj_iters)), int(sum(proj_iters[-50:])))


def exp_transform_check(v: ScalarField, w: ScalarField, dist: DistanceField, delta: float = 0.1) -> dict:
    """Compare v − min v with −log(w / max w) on Ω_δ in the sup norm."""
    I = dist.grid.interior
    m = I & (np.nan_to_num(dist.d.values, nan=-1) > delta)
    if not m.any():
        raise ValueError("empty comparison set")
    vv = v.values
    ww = w.values
    if np.any(ww[m] <= 0):
        raise ValueError("w must be positive on the comparison set")
    a = vv[m] - np.min(vv[I])
    b = -np.log(ww[m] / np.max(ww[I]))
    scale = max(float(np.max(np.abs(b))), 1e-300)
    err = float(np.max(np.abs(a - b)))
    return {"sup_abs": err, "relative": err / scale, "nodes": int(m.sum()), "delta": delta}


def ergodic_constant_uniqueness_probe(problem: ProblemSpec, dist: DistanceField, u0: float, offsets,
                                      v_init: ScalarField | None = None, *, lam_floor: float = 1e-4,
                                      delta: float = 0.1, newton_tol: float | None = None) -> dict:
    """Solve −Δ_H v + H(∇v)^q + λ_floor·v = f − (u₀ + c) with blow-up data
    for each offset c and report the residual of the ergodic equation with
    constant u₀ + c, which equals sup over Ω_δ of |λ_floor·v|.  Only the
    true constant keeps it small."""
    grid = dist.grid
    I = grid.interior
    mon = I & (np.nan_to_num(dist.d.values, nan=-1) > delta)
    out = []
    for c in offsets:
        src = problem.source
        pb = problem.replace(lam=lam_floor, source=SourceSpec(src.f0 - (u0 + c), src.C1, src.beta))
        guess = None
        if v_init is not None:
            guess = ScalarField(grid, np.where(I, v_init.values - c / lam_floor, np.nan), I.copy())
        if guess is None:
            u = solve_blowup(pb, dist, (10.0, 20.0, 40.0, 80.0, 160.0), newton_tol=newton_tol).limit
        else:
            u, _ = solve_truncated(pb, dist, math.inf, guess, newton_tol=newton_tol)
        res = float(lam_floor * np.max(np.abs(u.values[mon])))
        out.append({"offset": float(c), "residual": res})
    base = [r["residual"] for r in out if r["offset"] == 0.0]
    return {"lam_floor": lam_floor, "delta": delta, "probes": out,
            "baseline": base[0] if base else None}
