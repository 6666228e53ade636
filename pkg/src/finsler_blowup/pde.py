"""Finite-difference solver for −Δ_H u + H(∇u)^q + λu = f.

The divergence term is discretized conservatively: fluxes H(g)H_ξ(g) live on
the four faces of each Interior node, with the normal gradient taken across
the face and the tangential gradient averaged from the node-centred
differences of the face's interior endpoints.  All discrete gradients are
affine in the nodal unknowns, so they are stored as sparse matrices and the
Newton Jacobian is exact.

Two formulations share that machinery.

``direct``
    unknown u, BoundaryLayer nodes pinned to the datum M (staircase boundary).
``transformed`` (default)
    unknown z with u = s + φ(z), where φ(z) = κ(z^{−α} − 1)/α (φ = −log z when
    q = 2) and κ = (α+1)^{1/(q−1)}.  The datum u = M on ∂Ω becomes
    z_b = φ⁻¹(M − s), and M = ∞ is simply z_b = 0.  The boundary is imposed at
    its true position by linear ghost extrapolation along each grid line.
    Near a blow-up boundary z behaves like the distance, so the
    discretization resolves the singular layer that the direct form smears.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import DistanceField, DomainSpec, Grid, ScalarField
from .norms import NormSpec, _hess_H2_unchecked, estimate_constants, eval_H, flux

__all__ = [
    "Regime",
    "SourceSpec",
    "ProblemSpec",
    "SolveReport",
    "BlowupRun",
    "NonConvergence",
    "SingularJacobian",
    "Discretization",
    "assemble_residual",
    "assemble_jacobian",
    "stencil_residual",
    "solve_truncated",
    "solve_blowup",
    "comparison_check",
    "gradient_diagnostic",
]


class Regime(str, Enum):
    SUBCRITICAL = "subcritical"  # f = o(d^{-q'})
    CRITICAL = "critical"  # f ~ C1 d^{-q'}
    FAST = "fast"  # f ~ C1 d^{-beta}, beta > q'


@dataclass(frozen=True)
class SourceSpec:
    """f(x) = f0 + C1·d_H(x)^{−β}."""

    f0: float = 0.0
    C1: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.C1 < 0 or self.beta < 0:
            raise ValueError("C1 and beta must be nonnegative")

    def regime(self, q: float) -> Regime:
        qp = q / (q - 1.0)
        if self.C1 == 0 or self.beta < qp - 1e-12:
            return Regime.SUBCRITICAL
        if abs(self.beta - qp) <= 1e-12:
            return Regime.CRITICAL
        return Regime.FAST

    def evaluate(self, d: np.ndarray, h: float) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if self.C1 == 0:
            return np.full(d.shape, float(self.f0))
        return self.f0 + self.C1 * np.maximum(d, 0.5 * h) ** (-self.beta)

    def to_dict(self):
        return {"f0": self.f0, "C1": self.C1, "beta": self.beta}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d.get("f0", 0.0)), float(d.get("C1", 0.0)), float(d.get("beta", 0.0)))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    norm: NormSpec
    domain: DomainSpec
    q: float = 2.0
    lam: float = 1.0
    source: SourceSpec = field(default_factory=SourceSpec)

    def __post_init__(self):
        if not 1.0 < self.q <= 2.0:
            raise ValueError("q must lie in (1, 2]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @property
    def q_prime(self) -> float:
        return self.q / (self.q - 1.0)

    @property
    def alpha(self) -> float:
        return (2.0 - self.q) / (self.q - 1.0)

    @property
    def kappa(self) -> float:
        return (self.alpha + 1.0) ** (1.0 / (self.q - 1.0))

    @property
    def log_mode(self) -> bool:
        return self.q == 2.0

    def replace(self, **kw) -> "ProblemSpec":
        return replace(self, **kw)

    def default_tol(self) -> float:
        return 1e-9 * (1.0 + abs(self.source.f0) + self.source.C1)

    def to_dict(self):
        return {
            "norm": self.norm.to_dict(),
            "domain": self.domain.to_dict(),
            "q": self.q,
            "lambda": self.lam,
            "source": self.source.to_dict(),
        }


@dataclass
class SolveReport:
    newton_iters: int = 0
    residual_history: list = field(default_factory=list)
    damping_events: int = 0
    regularization_hits: int = 0
    converged: bool = False
    final_residual: float = float("inf")
    formulation: str = "transformed"
    M: float = 0.0
    substeps: int = 1
    shift: float = 0.0
    shift_settled: bool = True

    def to_dict(self):
        return {
            "newton_iters": self.newton_iters,
            "residual_history": [float(r) for r in self.residual_history],
            "damping_events": self.damping_events,
            "regularization_hits": self.regularization_hits,
            "converged": self.converged,
            "final_residual": float(self.final_residual),
            "formulation": self.formulation,
            "M": _json_float(self.M),
            "substeps": self.substeps,
            "shift": float(self.shift),
            "shift_settled": self.shift_settled,
        }


def _json_float(x):
    x = float(x)
    return "inf" if math.isinf(x) and x > 0 else x


class NonConvergence(RuntimeError):
    def __init__(self, msg, report: SolveReport | None = None):
        super().__init__(msg)
        self.report = report


class SingularJacobian(RuntimeError):
    pass


@dataclass
class BlowupRun:
    M_schedule: list
    solutions: list
    interior_deltas: list
    limit: ScalarField
    reports: list
    monotone_violation: float
    stabilized: bool
    closed_at_infinity: bool = False
    monitor_delta: float = 0.0

    def to_dict(self):
        return {
            "M_schedule": [_json_float(m) for m in self.M_schedule],
            "interior_deltas": [float(x) for x in self.interior_deltas],
            "monotone_violation": float(self.monotone_violation),
            "stabilized": self.stabilized,
            "closed_at_infinity": self.closed_at_infinity,
            "monitor_delta": self.monitor_delta,
            "reports": [r.to_dict() for r in self.reports],
        }


# ---------------------------------------------------------------------------
# discretization

_DIRS = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}
THETA_MIN = 0.01
THETA_GRAD = 0.25


class Discretization:
    """Sparse affine gradient operators on the Interior nodes of a grid.

    Every discrete gradient has the form G·z + g·z_b, where z_b is the scalar
    boundary datum.  ``boundary='ghost'`` places the datum at the true
    boundary crossing (fraction θ of the grid spacing, from the signed
    distance); ``'staircase'`` puts it on the BoundaryLayer node (θ = 1).
    """

    def __init__(self, grid: Grid, dist: DistanceField, boundary: str = "ghost"):
        if boundary not in ("ghost", "staircase"):
            raise ValueError("boundary must be 'ghost' or 'staircase'")
        self.grid, self.dist, self.boundary = grid, dist, boundary
        h = grid.h
        mask = grid.interior
        n = int(mask.sum())
        idx = np.full(grid.shape, -1, dtype=np.int64)
        idx[mask] = np.arange(n)
        self.n, self.idx, self.mask = n, idx, mask
        iy, ix = np.nonzero(mask)
        rows = np.arange(n)
        ds = dist.d_signed.values
        ident = sp.identity(n, format="csr")

        # neighbour value operators N_k = P_k z + p_k z_b
        P, p, sel, has = {}, {}, {}, {}
        self.theta_min = 1.0
        for k, (dx, dy) in _DIRS.items():
            jy, jx = iy + dy, ix + dx
            nb = idx[jy, jx]
            inside = nb >= 0
            if boundary == "ghost":
                d_i = ds[iy, ix]
                d_g = ds[jy, jx]
                with np.errstate(divide="ignore", invalid="ignore"):
                    theta = np.where(inside, 1.0, d_i / (d_i - d_g))
                theta = np.clip(np.nan_to_num(theta, nan=1.0), THETA_MIN, 1.0)
            else:
                theta = np.ones(n)
            self.theta_min = min(self.theta_min, float(theta.min()))
            cols = np.where(inside, nb, rows)
            for key, th in ((k, theta), (k + "c", np.maximum(theta, THETA_GRAD))):
                vals = np.where(inside, 1.0, 1.0 - 1.0 / th)
                P[key] = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
                p[key] = np.where(inside, 0.0, 1.0 / th)
            sel[k] = sp.csr_matrix((inside.astype(float), (rows, np.where(inside, nb, 0))), shape=(n, n))
            has[k] = inside

        Cx = (P["Ec"] - P["Wc"]) / (2 * h)
        cx = (p["Ec"] - p["Wc"]) / (2 * h)
        Cy = (P["Nc"] - P["Sc"]) / (2 * h)
        cy = (p["Nc"] - p["Sc"]) / (2 * h)
        self.C = (Cx.tocsr(), cx, Cy.tocsr(), cy)

        def avg(k, Cm, cv):
            w = np.where(has[k], 0.5, 1.0)
            M = sp.diags(w) @ Cm + 0.5 * (sel[k] @ Cm)
            v = w * cv + 0.5 * (sel[k] @ cv)
            return M.tocsr(), v

        faces = {}
        Ty, ty = avg("E", Cy, cy)
        faces["E"] = ((P["E"] - ident) / h, p["E"] / h, Ty, ty)
        Ty, ty = avg("W", Cy, cy)
        faces["W"] = ((ident - P["W"]) / h, -p["W"] / h, Ty, ty)
        Tx, tx = avg("N", Cx, cx)
        faces["N"] = (Tx, tx, (P["N"] - ident) / h, p["N"] / h)
        Tx, tx = avg("S", Cx, cx)
        faces["S"] = (Tx, tx, (ident - P["S"]) / h, -p["S"] / h)
        self.faces = {k: (A.tocsr(), a, B.tocsr(), b) for k, (A, a, B, b) in faces.items()}

    def scatter(self, vec: np.ndarray, fill=np.nan) -> np.ndarray:
        out = np.full(self.grid.shape, fill, dtype=float)
        out[self.mask] = vec
        return out

    def gather(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=float)[self.mask]

    def node_gradient(self, z, zb):
        Cx, cx, Cy, cy = self.C
        return np.stack([Cx @ z + cx * zb, Cy @ z + cy * zb], axis=-1)

    def face_gradient(self, k, z, zb):
        A, a, B, b = self.faces[k]
        return np.stack([A @ z + a * zb, B @ z + b * zb], axis=-1)

    def divergence(self, norm: NormSpec, z, zb):
        """Conservative −Δ_H z (sign included) and the per-face gradients."""
        h = self.grid.h
        g = {k: self.face_gradient(k, z, zb) for k in _DIRS}
        F = {k: flux(norm, g[k]) for k in _DIRS}
        div = (F["E"][:, 0] - F["W"][:, 0] + F["N"][:, 1] - F["S"][:, 1]) / h
        return -div, g

    def divergence_jacobian(self, norm: NormSpec, g: dict, eps_reg: float, gamma: float):
        h = self.grid.h
        J = None
        hits = 0
        for k, sign, comp in (("E", 1, 0), ("W", -1, 0), ("N", 1, 1), ("S", -1, 1)):
            gk = g[k]
            small = np.hypot(gk[:, 0], gk[:, 1]) < eps_reg
            hits += int(small.sum())
            Hs = _hess_H2_unchecked(norm, np.where(small[:, None], 1.0, gk))
            Hs[small] = gamma * np.eye(2)
            A, _, B, _ = self.faces[k]
            term = sp.diags(Hs[:, comp, 0]) @ A + sp.diags(Hs[:, comp, 1]) @ B
            term = term * (-sign / h)
            J = term if J is None else J + term
        return J.tocsr(), hits


# ---------------------------------------------------------------------------
# formulations


class _Direct:
    name = "direct"

    def __init__(self, problem, M):
        self.problem, self.M = problem, float(M)
        if not math.isfinite(self.M):
            raise ValueError("the direct formulation needs a finite datum M")
        self.zb = self.M
        self.s = 0.0

    def datum(self, M):
        return float(M)

    def to_z(self, u):
        return np.asarray(u, dtype=float)

    def to_u(self, z):
        return z

    def admissible(self, z):
        return np.all(np.isfinite(z))

    def lower(self, z, gc, f):
        pb = self.problem
        Hc = eval_H(pb.norm, gc)
        return Hc**pb.q + pb.lam * z - f

    def lower_jac(self, z, gc, f, D):
        pb = self.problem
        Hc = eval_H(pb.norm, gc)
        Fc = flux(pb.norm, gc)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(Hc > 0, pb.q * Hc ** (pb.q - 2.0), 0.0)
        Cx, _, Cy, _ = D.C
        return sp.diags(w * Fc[:, 0]) @ Cx + sp.diags(w * Fc[:, 1]) @ Cy + sp.diags(np.full(len(z), pb.lam))


class _Transformed:
    name = "transformed"

    def __init__(self, problem, M, s):
        self.problem = problem
        self.a = problem.alpha
        self.k = problem.kappa
        self.s = float(s)
        self.M = float(M)
        if math.isinf(self.M):
            self.zb = 0.0
        else:
            self.zb = self.datum(self.M)

    def datum(self, M):
        return 0.0 if math.isinf(M) else float(self.phi_inv(np.array(float(M) - self.s)))

    def phi(self, z):
        if self.a == 0:
            return -np.log(z)
        return self.k * (z ** (-self.a) - 1.0) / self.a

    def phi_inv(self, y):
        y = np.asarray(y, dtype=float)
        if self.a == 0:
            return np.exp(-y)
        base = 1.0 + self.a * y / self.k
        if np.any(base <= 0):
            raise ValueError("value below the range of the transform; lower the shift")
        return base ** (-1.0 / self.a)

    def to_z(self, u):
        return self.phi_inv(np.asarray(u, dtype=float) - self.s)

    def to_u(self, z):
        return self.s + self.phi(z)

    def admissible(self, z):
        return np.all(np.isfinite(z)) and np.all(z > 0)

    def _zero(self, z, f):
        pb = self.problem
        return f - pb.lam * self.s - pb.lam * self.phi(z)

    def lower(self, z, gc, f):
        pb = self.problem
        Hc = eval_H(pb.norm, gc)
        T = Hc**pb.q - Hc**2
        return -(self.a + 1.0) * T / z + z ** (self.a + 1.0) * self._zero(z, f) / self.k

    def lower_jac(self, z, gc, f, D):
        pb = self.problem
        a1 = self.a + 1.0
        Hc = eval_H(pb.norm, gc)
        Fc = flux(pb.norm, gc)
        T = Hc**pb.q - Hc**2
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(Hc > 0, pb.q * Hc ** (pb.q - 2.0), 0.0) - 2.0
        coef = -a1 / z * w
        Cx, _, Cy, _ = D.C
        diag = a1 * T / z**2 + a1 * z**self.a * self._zero(z, f) / self.k + pb.lam
        return sp.diags(coef * Fc[:, 0]) @ Cx + sp.diags(coef * Fc[:, 1]) @ Cy + sp.diags(diag)


class _System:
    def __init__(self, problem: ProblemSpec, dist: DistanceField, D: Discretization, form):
        self.problem, self.dist, self.D, self.form = problem, dist, D, form
        d = D.gather(dist.d.values)
        self.f = problem.source.evaluate(d, dist.grid.h)
        self.gamma = estimate_constants(problem.norm, 512).gamma_est

    def residual(self, z):
        div, _ = self.D.divergence(self.problem.norm, z, self.form.zb)
        gc = self.D.node_gradient(z, self.form.zb)
        return div + self.form.lower(z, gc, self.f)

    def jacobian(self, z, eps_reg):
        _, g = self.D.divergence(self.problem.norm, z, self.form.zb)
        J, hits = self.D.divergence_jacobian(self.problem.norm, g, eps_reg, self.gamma)
        gc = self.D.node_gradient(z, self.form.zb)
        return (J + self.form.lower_jac(z, gc, self.f, self.D)).tocsc(), hits


_DISC_CACHE: dict = {}


def _discretization(grid, dist, boundary) -> Discretization:
    key = (id(grid), id(dist), boundary)
    hit = _DISC_CACHE.get(key)
    if hit is not None and hit[0] is grid and hit[1] is dist:
        return hit[2]
    D = Discretization(grid, dist, boundary)
    if len(_DISC_CACHE) > 16:
        _DISC_CACHE.clear()
    _DISC_CACHE[key] = (grid, dist, D)
    return D


def _newton(sys: _System, z0, tol, max_iter=200, max_halvings=20, polish=True):
    form = sys.form
    rep = SolveReport(formulation=form.name, M=form.M)
    z = z0.copy()
    R = sys.residual(z)
    r = float(np.max(np.abs(R)))
    rep.residual_history.append(r)
    it = 0
    while r > tol and it < max_iter:
        eps_reg = 1e-8 * (1.0 + np.max(np.abs(z)) / sys.dist.grid.h)
        J, hits = sys.jacobian(z, eps_reg)
        rep.regularization_hits = hits
        try:
            dz = splu(J).solve(-R)
        except RuntimeError as exc:
            raise SingularJacobian(f"{exc} at Newton iteration {it}") from exc
        t = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            zn = z + t * dz
            if form.admissible(zn):
                Rn = sys.residual(zn)
                rn = float(np.max(np.abs(Rn)))
                if rn < r:
                    accepted = True
                    break
            t *= 0.5
            rep.damping_events += 1
        it += 1
        if not accepted:
            break
        z, R, r = zn, Rn, rn
        rep.residual_history.append(r)
    rep.newton_iters = it
    rep.converged = r <= tol
    if rep.converged and polish:
        # one extra full step pushes the error to round-off level
        J, _ = sys.jacobian(z, 1e-8 * (1.0 + np.max(np.abs(z)) / sys.dist.grid.h))
        try:
            zn = z + splu(J).solve(-R)
            if form.admissible(zn):
                rn = float(np.max(np.abs(sys.residual(zn))))
                if rn < r:
                    z, r = zn, rn
                    rep.residual_history.append(r)
                    rep.newton_iters += 1
        except RuntimeError:
            pass
    rep.final_residual = r
    return z, rep


def _spurious(sys: _System, z) -> bool:
    """True when the transformed residual is small only because z is.

    The transformed residual is the u-form residual times z^{α+1}/κ, so a
    field with z ≈ 0 throughout (u far above every solution) also makes it
    vanish.  Undo the scaling on the deep interior, where a genuine solution
    keeps z away from zero, and compare with the size of the equation.
    """
    form = sys.form
    d = sys.D.gather(sys.dist.d.values)
    deep = d >= 0.25 * np.max(d)
    R = sys.residual(z)[deep]
    zd = z[deep]
    ru = np.abs(R) * form.k / zd ** (form.a + 1.0)
    u = form.to_u(zd)
    scale = 1.0 + np.max(np.abs(sys.f)) + sys.problem.lam * np.max(np.abs(u))
    return bool(np.max(ru) > 1e-4 * scale)


def _recentre(sys: _System, z, tol, max_iter, rep):
    """Recover from a spurious root by moving the shift to the solution.

    On the deep interior the unscaled residual of a spurious iterate is
    about λ(u_true − u), so one correction usually lands in the basin of the
    true solution; a few attempts are allowed before giving up.
    """
    form = sys.form
    lam = sys.problem.lam
    if not lam > 0:
        rep.converged = False
        return z, rep
    d = sys.D.gather(sys.dist.d.values)
    deep = d >= 0.25 * np.max(d)
    spent = rep.newton_iters
    for _ in range(3):
        ru = sys.residual(z) * form.k / z ** (form.a + 1.0)
        u = form.to_u(z) + float(np.median(ru[deep])) / lam
        form.s = float(np.min(u))
        if math.isfinite(form.M):
            form.s = min(form.s, form.M)
            form.zb = form.datum(form.M)
        z, rep = _newton(sys, form.to_z(u), tol, max_iter=max_iter)
        spent += rep.newton_iters
        if rep.converged and not _spurious(sys, z):
            break
        rep.converged = False
    rep.newton_iters = spent
    return z, rep


def _settle_shift(sys: _System, z, tol, max_iter, rep, max_rounds=15):
    """Move the shift to the minimum of the solution until it stops moving.

    For q < 2 the transformed scheme is not invariant under the shift, so a
    shift taken from the initial guess would make the discrete solution depend
    on that guess.  Anchoring it at min u removes the dependence, and it is
    also the most accurate choice we measured.  For q = 2 the scheme is
    shift-invariant, but a far-off shift leaves z tiny and loosens the
    effective tolerance on u.

    The fixed point of s -> min u_s is found by secant steps on
    g(s) = min u_s - s; plain iteration oscillates for small λ, where the
    whole solution moves with the shift.  Each solve therefore starts from
    the previous solution translated by the predicted change, and a step
    that still makes Newton fail is halved.
    """
    form = sys.form
    spent = rep.newton_iters
    good = rep
    settled = False
    prev = None
    for _ in range(max_rounds):
        u = form.to_u(z)
        target = float(np.min(u))
        if math.isfinite(form.M):
            target = min(target, form.M)
        g = target - form.s
        if abs(g) <= tol * (1.0 + abs(target)):
            settled = True
            break
        step, follow = g, 0.0
        if prev is not None and g != prev[1]:
            slope = (g - prev[1]) / (form.s - prev[0])
            step = float(np.clip(-g / slope, -10 * abs(g), 10 * abs(g)))
            # min u moves by (slope + 1) per unit of shift, almost uniformly
            follow = slope + 1.0
        prev = (form.s, g)
        s_old, t, moved = form.s, 1.0, False
        while t >= 1.0 / 8:
            form.s = s_old + t * step
            if math.isfinite(form.M):
                form.zb = form.datum(form.M)
            try:
                z_start = form.to_z(u + follow * t * step)
            except ValueError:
                t *= 0.5
                continue
            zn, sub = _newton(sys, z_start, tol, max_iter=min(max_iter, 40))
            spent += sub.newton_iters
            if sub.converged and not _spurious(sys, zn):
                z, good, moved = zn, sub, True
                break
            t *= 0.5
        if not moved:
            form.s = s_old
            if math.isfinite(form.M):
                form.zb = form.datum(form.M)
            break
    good.newton_iters = spent
    good.shift_settled = settled
    return z, good


def _constant_bounds(sys: _System):
    """Constant sub- and supersolutions: every solution lies between them.

    With λ > 0, c = min(M, min f/λ) and C = max(M, max f/λ) satisfy the
    equation with ≤ and ≥ respectively and respect the datum, so the
    comparison principle traps u in [c, C] (C = ∞ when M = ∞).
    """
    lam = sys.problem.lam
    M = sys.form.M
    if not lam > 0:
        return -math.inf, math.inf
    lo = min(M, float(np.min(sys.f)) / lam)
    hi = max(M, float(np.max(sys.f)) / lam) if math.isfinite(M) else math.inf
    return lo, hi


def _within(sys: _System, z, lo, hi) -> bool:
    u = sys.form.to_u(z)
    slack = 1e-6 * (1.0 + max(abs(lo), abs(hi) if math.isfinite(hi) else 0.0))
    return bool(np.min(u) >= lo - slack and np.max(u) <= hi + slack)


def _default_shift(problem, dist, u_init):
    if u_init is not None:
        vals = u_init.values[dist.grid.interior]
        return float(np.nanmin(vals))
    if problem.lam > 0:
        return min(0.0, problem.source.f0 / problem.lam)
    return 0.0


def solve_truncated(problem: ProblemSpec, dist: DistanceField, M: float,
                    u_init: ScalarField | None = None, *, formulation: str = "transformed",
                    newton_tol: float | None = None, max_iter: int = 200, shift: float | None = None,
                    M_from: float | None = None, raise_on_failure: bool = True):
    """Solve the problem with constant boundary datum M (M = inf allowed in the
    transformed formulation).  Returns (u, SolveReport); u is defined on
    Interior nodes.

    ``M_from`` names the datum ``u_init`` was computed with.  If Newton fails
    from the warm start, the datum is then moved from ``M_from`` to ``M`` in
    progressively finer substeps, each solve seeding the next.
    """
    grid = dist.grid
    tol = problem.default_tol() if newton_tol is None else newton_tol
    if formulation == "direct":
        D = _discretization(grid, dist, "staircase")
        form = _Direct(problem, M)
    elif formulation == "transformed":
        D = _discretization(grid, dist, "ghost")
        s = _default_shift(problem, dist, u_init) if shift is None else shift
        for m in (M, M_from):
            if m is not None and math.isfinite(m):
                s = min(s, float(m))
        form = _Transformed(problem, M, s)
    else:
        raise ValueError(f"unknown formulation {formulation!r}")
    sys = _System(problem, dist, D, form)
    lo, hi = _constant_bounds(sys)

    def cold():
        if form.name == "direct":
            return np.full(D.n, form.M)
        if u_init is not None and shift is None:
            form.s = min(_default_shift(problem, dist, None), form.M)
            form.zb = form.datum(form.M)
        return form.zb + D.gather(dist.d.values)

    z0 = cold() if u_init is None else form.to_z(np.clip(D.gather(u_init.values), lo, hi))
    z, rep = _newton(sys, z0, tol, max_iter=max_iter)
    if rep.converged and form.name == "transformed" and _spurious(sys, z):
        z, rep = _recentre(sys, z, tol, max_iter, rep)
    if rep.converged and not _within(sys, z, lo, hi):
        # a root outside the constant barriers is an artefact of the start
        rep.converged = False
    if not rep.converged and u_init is not None and M_from is None:
        spent = rep.newton_iters
        z, rep = _newton(sys, cold(), tol, max_iter=max_iter)
        if rep.converged and form.name == "transformed" and _spurious(sys, z):
            z, rep = _recentre(sys, z, tol, max_iter, rep)
        rep.converged = rep.converged and _within(sys, z, lo, hi)
        rep.newton_iters += spent
    if not rep.converged and M_from is not None and u_init is not None:
        target = form.zb
        start = form.datum(M_from)
        spent = rep.newton_iters
        for nsub in (2, 4, 8, 16, 32, 64):
            zk, ok = z0, True
            for t in np.linspace(0.0, 1.0, nsub + 1)[1:]:
                form.zb = start + t * (target - start)
                zk, sub = _newton(sys, zk, tol, max_iter=max_iter)
                spent += sub.newton_iters
                if not sub.converged or _spurious(sys, zk) or not _within(sys, zk, lo, hi):
                    ok = False
                    break
            if ok:
                z, rep = zk, sub
                rep.substeps = nsub
                break
        form.zb = target
        rep.newton_iters = spent
    if rep.converged and form.name == "transformed" and shift is None:
        z, rep = _settle_shift(sys, z, tol, max_iter, rep)
        rep.converged = rep.converged and _within(sys, z, lo, hi)
    if not rep.converged and raise_on_failure:
        why = (f"residual {rep.final_residual:.3e} is below tol {tol:.1e} only because z vanishes"
               if rep.final_residual <= tol else
               f"Newton stalled at residual {rep.final_residual:.3e} (tol {tol:.1e})")
        raise NonConvergence(f"{why} for M={M}", rep)
    rep.shift = form.s
    u = ScalarField(grid, D.scatter(form.to_u(z)), grid.interior.copy())
    return u, rep


def assemble_residual(problem: ProblemSpec, u: ScalarField, dist: DistanceField, M: float) -> ScalarField:
    """u-form residual at Interior nodes with BoundaryLayer values equal to M."""
    D = _discretization(dist.grid, dist, "staircase")
    vals = D.gather(u.values)
    if not np.all(np.isfinite(vals)):
        raise ValueError("u must be finite on every Interior node")
    sys = _System(problem, dist, D, _Direct(problem, M))
    return ScalarField(dist.grid, D.scatter(sys.residual(vals)), dist.grid.interior.copy())


def assemble_jacobian(problem: ProblemSpec, u: ScalarField, dist: DistanceField, M: float):
    """Sparse Jacobian of :func:`assemble_residual` with respect to the
    Interior values (row/column order = row-major Interior nodes)."""
    D = _discretization(dist.grid, dist, "staircase")
    vals = D.gather(u.values)
    sys = _System(problem, dist, D, _Direct(problem, M))
    eps_reg = 1e-8 * (1.0 + np.max(np.abs(vals)) / dist.grid.h)
    return sys.jacobian(vals, eps_reg)[0]


def stencil_residual(problem: ProblemSpec, u: np.ndarray, dist: DistanceField,
                     lam: float | None = None, f: np.ndarray | None = None) -> np.ndarray:
    """u-form residual of an arbitrary full-grid array, evaluated wherever the
    3×3 neighbourhood of a node is finite (NaN elsewhere).  Same face-flux
    scheme as the solver, without any boundary treatment."""
    grid = dist.grid
    h = grid.h
    lam = problem.lam if lam is None else lam
    u = np.asarray(u, dtype=float)
    if f is None:
        f = problem.source.evaluate(np.where(grid.interior, dist.d.values, np.inf), h)
    ny, nx = u.shape
    out = np.full(u.shape, np.nan)
    gxc = np.full(u.shape, np.nan)
    gyc = np.full(u.shape, np.nan)
    gxc[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2 * h)
    gyc[1:-1, :] = (u[2:, :] - u[:-2, :]) / (2 * h)
    # x-faces between (i, j) and (i, j+1)
    fx = np.stack([(u[:, 1:] - u[:, :-1]) / h, 0.5 * (gyc[:, 1:] + gyc[:, :-1])], axis=-1)
    fy = np.stack([0.5 * (gxc[1:, :] + gxc[:-1, :]), (u[1:, :] - u[:-1, :]) / h], axis=-1)
    Fx = flux(problem.norm, np.nan_to_num(fx))[..., 0]
    Fy = flux(problem.norm, np.nan_to_num(fy))[..., 1]
    Fx[~np.all(np.isfinite(fx), axis=-1)] = np.nan
    Fy[~np.all(np.isfinite(fy), axis=-1)] = np.nan
    div = np.full(u.shape, np.nan)
    div[1:-1, 1:-1] = (Fx[1:-1, 1:] - Fx[1:-1, :-1]) / h + (Fy[1:, 1:-1] - Fy[:-1, 1:-1]) / h
    gc = np.stack([gxc, gyc], axis=-1)
    Hc = eval_H(problem.norm, np.nan_to_num(gc))
    out = -div + Hc**problem.q + lam * u - f
    ok = np.zeros(u.shape, dtype=bool)
    fin = np.isfinite(u)
    ok[1:-1, 1:-1] = (
        fin[1:-1, 1:-1] & fin[2:, 1:-1] & fin[:-2, 1:-1] & fin[1:-1, 2:] & fin[1:-1, :-2]
        & fin[2:, 2:] & fin[2:, :-2] & fin[:-2, 2:] & fin[:-2, :-2]
    )
    out[~ok] = np.nan
    return out


# ---------------------------------------------------------------------------
# blow-up driver


def _monitor_mask(dist: DistanceField, delta: float) -> np.ndarray:
    return dist.grid.interior & (np.nan_to_num(dist.d.values, nan=-1.0) > delta)


def solve_blowup(problem: ProblemSpec, dist: DistanceField, schedule, stop_tol: float = 1e-3,
                 monitor_delta: float | None = None, *, close_at_infinity: bool = True,
                 stop_early: bool = False, formulation: str = "transformed",
                 newton_tol: float | None = None) -> BlowupRun:
    """Warm-started sweep over an increasing schedule of boundary data.

    ``interior_deltas[k]`` is the sup over Ω_δ of |u_{M_{k+1}} − u_{M_k}|.
    With ``stop_early`` the sweep ends as soon as that change drops below
    ``stop_tol``.  With ``close_at_infinity`` (transformed formulation only)
    the sweep is followed by the M = ∞ problem, whose solution becomes the
    limit; otherwise the last iterate is the limit.
    """
    schedule = [float(m) for m in schedule]
    if len(schedule) < 2 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing with at least two entries")
    grid = dist.grid
    delta = 8 * grid.h if monitor_delta is None else monitor_delta
    # keep the monitor set nonempty on coarse grids or thin domains
    delta = min(delta, 0.5 * dist.inradius)
    mon = _monitor_mask(dist, delta)
    tol = problem.default_tol() if newton_tol is None else newton_tol
    sols, reps, deltas = [], [], []
    viol = -np.inf
    prev = None
    stabilized = False
    used = []
    for M in schedule:
        u, rep = solve_truncated(problem, dist, M, prev, formulation=formulation, newton_tol=tol,
                                 M_from=used[-1] if used else None)
        sols.append(u)
        reps.append(rep)
        used.append(M)
        if prev is not None:
            diff = u.values - prev.values
            I = grid.interior
            viol = max(viol, float(np.max(-diff[I])))
            deltas.append(float(np.max(np.abs(diff[mon]))) if mon.any() else 0.0)
            if deltas[-1] <= stop_tol:
                stabilized = True
                if stop_early:
                    break
        prev = u
    limit = sols[-1]
    closed = False
    if close_at_infinity and formulation == "transformed":
        limit, rep = solve_truncated(problem, dist, math.inf, prev, newton_tol=tol, M_from=used[-1])
        reps.append(rep)
        closed = True
    return BlowupRun(used, sols, deltas, limit, reps, max(viol, 0.0) if viol > -np.inf else 0.0,
                     stabilized, closed, delta)


def comparison_check(problem_a: ProblemSpec, problem_b: ProblemSpec, dist: DistanceField, M: float,
                     *, u_init_a=None, u_init_b=None, newton_tol: float | None = None) -> dict:
    """Solve both truncated problems and measure how far u_a exceeds u_b."""
    tol = max(problem_a.default_tol(), problem_b.default_tol()) if newton_tol is None else newton_tol
    ua, ra = solve_truncated(problem_a, dist, M, u_init_a, newton_tol=tol)
    ub, rb = solve_truncated(problem_b, dist, M, u_init_b, newton_tol=tol)
    I = dist.grid.interior
    diff = ua.values[I] - ub.values[I]
    worst = float(np.max(diff))
    return {
        "ordered": bool(worst <= 2 * tol),
        "max_violation": max(worst, 0.0),
        "sup_abs_difference": float(np.max(np.abs(diff))),
        "violating_nodes": int(np.sum(diff > 2 * tol)),
        "tol": tol,
        "u_a": ua,
        "u_b": ub,
    }


def gradient_diagnostic(u: ScalarField, dist: DistanceField, problem: ProblemSpec,
                        deltas=(0.05, 0.1, 0.2, 0.3)) -> dict:
    """Scaled gradient s = |∇_h u|·d_H^{1/(q−1)} on d_H ≥ 3h, plus sup |∇_h u|
    over Ω_δ for a few δ."""
    grid = dist.grid
    h = grid.h
    v = np.where(grid.interior, u.values, np.nan)
    gx = np.full(v.shape, np.nan)
    gy = np.full(v.shape, np.nan)
    gx[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * h)
    gy[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * h)
    g = np.hypot(gx, gy)
    d = dist.d.values
    band = grid.interior & (np.nan_to_num(d) >= 3 * h) & np.isfinite(g)
    s = g[band] * d[band] ** (1.0 / (problem.q - 1.0))
    local = {}
    for delta in deltas:
        m = grid.interior & (np.nan_to_num(d) > delta) & np.isfinite(g)
        local[float(delta)] = float(g[m].max()) if m.any() else float("nan")
    return {
        "sup": float(s.max()) if s.size else 0.0,
        "p95": float(np.percentile(s, 95)) if s.size else 0.0,
        "count": int(s.size),
        "local_sup": local,
    }
