"""Independent reference solutions used to validate the 2-D solver."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve, splu

from .geometry import DomainSpec, Grid, ScalarField, build_grid, distance_fast_march
from .norms import NormSpec, eval_polar
from .pde import ProblemSpec, SourceSpec, solve_truncated

__all__ = [
    "RadialSolution",
    "solve_radial",
    "shoot_radial",
    "radial_residual",
    "radial_to_field",
    "dense_dirichlet_eigen",
    "scaling_check",
]


@dataclass
class RadialSolution:
    n: int
    q: float
    K: float
    r_nodes: np.ndarray
    U: np.ndarray
    Uprime: np.ndarray
    lam: float = 0.0
    newton_iters: int = 0

    def to_csv(self, path):
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "U", "Uprime"])
            for r, u, up in zip(self.r_nodes, self.U, self.Uprime):
                w.writerow([repr(float(r)), repr(float(u)), repr(float(up))])


def _radial_system(U, r, n, q, K, lam):
    h = r[1] - r[0]
    N = len(r) - 1
    F = np.zeros(N + 1)
    rows, cols, vals = [], [], []
    # centre: −n U'' + λU = K with the symmetric ghost U_{-1} = U_1
    F[0] = -n * 2 * (U[1] - U[0]) / h**2 + lam * U[0] - K
    rows += [0, 0]
    cols += [0, 1]
    vals += [2 * n / h**2 + lam, -2 * n / h**2]
    i = np.arange(1, N)
    ri = r[i]
    g = (U[i + 1] - U[i - 1]) / (2 * h)
    ag = np.abs(g)
    F[i] = (
        -(U[i + 1] - 2 * U[i] + U[i - 1]) / h**2
        - (n - 1) / ri * g
        + ag**q
        + lam * U[i]
        - K
    )
    dq = q * ag ** (q - 1) * np.sign(g)
    lo = -1 / h**2 + (n - 1) / ri / (2 * h) - dq / (2 * h)
    hi = -1 / h**2 - (n - 1) / ri / (2 * h) + dq / (2 * h)
    rows += list(np.r_[i, i, i])
    cols += list(np.r_[i - 1, i, i + 1])
    vals += list(np.r_[lo, np.full(len(i), 2 / h**2 + lam), hi])
    F[N] = U[N]
    rows.append(N)
    cols.append(N)
    vals.append(1.0)
    J = sp.csr_matrix((vals, (rows, cols)), shape=(N + 1, N + 1))
    return F, J


def solve_radial(n: int, q: float, K: float, nodes: int = 2000, lam: float = 0.0,
                 tol: float = 1e-12, max_iter: int = 100) -> RadialSolution:
    """Second-order finite differences for
    −U″ − (n−1)U′/r + |U′|^q + λU = K on [0, 1], U′(0) = 0, U(1) = 0,
    solved by damped Newton.  At r = 0 the operator is −n·U″."""
    if K <= 0:
        raise ValueError("K must be positive")
    if nodes < 200:
        raise ValueError("need at least 200 nodes")
    if n < 2:
        raise ValueError("n must be >= 2")
    r = np.linspace(0.0, 1.0, nodes + 1)
    U = K * (1.0 - r**2) / (2 * n)
    F, J = _radial_system(U, r, n, q, K, lam)
    res = np.max(np.abs(F))
    it = 0
    while res > tol * (1 + K) and it < max_iter:
        dU = spsolve(J.tocsc(), -F)
        t = 1.0
        while True:
            Un = U + t * dU
            Fn, Jn = _radial_system(Un, r, n, q, K, lam)
            rn = np.max(np.abs(Fn))
            if rn < res or t < 1e-6:
                break
            t *= 0.5
        U, F, J, res = Un, Fn, Jn, rn
        it += 1
    if res > tol * (1 + K) * 1e3:
        raise RuntimeError(f"radial Newton failed (residual {res:.3e})")
    Up = np.gradient(U, r, edge_order=2)
    Up[0] = 0.0
    return RadialSolution(n, q, K, r, U, Up, lam, it)


def radial_residual(sol: RadialSolution) -> float:
    """Sup of the finite-difference ODE residual on the interior nodes."""
    F, _ = _radial_system(sol.U, sol.r_nodes, sol.n, sol.q, sol.K, sol.lam)
    return float(np.max(np.abs(F[1:-1])))


def shoot_radial(n: int, q: float, K: float, lam: float = 0.0, r0: float = 1e-5,
                 rtol: float = 1e-12) -> float:
    """U(0) by shooting: integrate outward from the centre with an adaptive
    8th-order Runge–Kutta scheme and bisect on U(0) until U(1) = 0."""

    def rhs(r, y):
        U, V = y
        return [V, -(n - 1) / r * V + abs(V) ** q + lam * U - K]

    def end_value(U0):
        c = (lam * U0 - K) / n
        y0 = [U0 + 0.5 * c * r0**2, c * r0]
        sol = solve_ivp(rhs, (r0, 1.0), y0, method="DOP853", rtol=rtol, atol=1e-14)
        if sol.status != 0:
            return np.inf
        return sol.y[0, -1]

    lo, hi = 0.0, K / (2 * n)
    while end_value(hi) < 0:
        hi *= 2
    return brentq(end_value, lo, hi, xtol=1e-15, rtol=1e-14)


def radial_to_field(sol: RadialSolution, norm: NormSpec, grid: Grid, center=(0.0, 0.0)) -> ScalarField:
    """U(H°(x − centre)) on the grid, zero outside the unit Wulff shape."""
    pts = grid.points() - np.asarray(center, dtype=float)
    rho = eval_polar(norm, pts, tabulated=True)
    interp = PchipInterpolator(sol.r_nodes, sol.U)
    vals = np.where(rho < 1.0, interp(np.minimum(rho, 1.0)), 0.0)
    return ScalarField(grid, vals, grid.interior.copy())


def _dirichlet_laplacian(grid: Grid, boundary: str, ds=None):
    h = grid.h
    mask = grid.interior
    n = int(mask.sum())
    if n > 20000:
        raise ValueError("too many interior nodes for the direct eigensolver")
    idx = np.full(grid.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(n)
    iy, ix = np.nonzero(mask)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = idx[iy + dy, ix + dx]
        inside = nb >= 0
        if boundary == "shortley_weller" and ds is not None:
            # arm lengths from the signed distance, as a fraction of h
            di = ds[iy, ix]
            dg = ds[iy + dy, ix + dx]
            arm = np.where(inside, 1.0, np.clip(di / (di - dg), 0.01, 1.0))
        else:
            arm = np.ones(n)
        opp = idx[iy - dy, ix - dx]
        if boundary == "shortley_weller" and ds is not None:
            di = ds[iy, ix]
            dg = ds[iy - dy, ix - dx]
            arm_o = np.where(opp >= 0, 1.0, np.clip(di / (di - dg), 0.01, 1.0))
        else:
            arm_o = np.ones(n)
        w = 2.0 / (arm * (arm + arm_o) * h**2)
        diag += w
        rows.append(np.nonzero(inside)[0])
        cols.append(nb[inside])
        vals.append(-w[inside])
    rows = np.concatenate(rows + [np.arange(n)])
    cols = np.concatenate(cols + [np.arange(n)])
    vals = np.concatenate(vals + [diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def dense_dirichlet_eigen(grid: Grid, f_field=None, boundary: str = "shortley_weller", dist=None,
                          tol: float = 1e-13, max_iter: int = 500):
    """Smallest eigenvalue of −Δ_h + f with zero Dirichlet data, by
    shift-and-invert power iteration.

    ``staircase`` is the plain 5-point Laplacian with zero values on the
    BoundaryLayer nodes; ``shortley_weller`` uses the classical unequal-arm
    5-point formula with arms cut at the boundary crossing (needs ``dist``).
    Returns (eigenvalue, eigenvector as ScalarField normalized to h²Σw² = 1).
    """
    if boundary not in ("staircase", "shortley_weller"):
        raise ValueError("boundary must be 'staircase' or 'shortley_weller'")
    ds = None
    if boundary == "shortley_weller":
        if dist is None:
            raise ValueError("shortley_weller needs the distance field")
        ds = dist.d_signed.values
    L = _dirichlet_laplacian(grid, boundary, ds)
    n = L.shape[0]
    if f_field is None:
        f = np.zeros(n)
    elif isinstance(f_field, ScalarField):
        f = f_field.values[grid.interior]
    elif np.ndim(f_field) == 0:
        f = np.full(n, float(f_field))
    else:
        f = np.asarray(f_field, dtype=float)[grid.interior]
    A = (L + sp.diags(f)).tocsc()
    sigma = float(f.min()) if n else 0.0
    lu = splu((A - sigma * sp.identity(n, format="csc")).tocsc())
    x = np.ones(n)
    x /= np.linalg.norm(x)
    mu = np.inf
    for _ in range(max_iter):
        y = lu.solve(x)
        y /= np.linalg.norm(y)
        mu_new = float(y @ (A @ y))
        x = y
        if abs(mu_new - mu) <= tol * max(1.0, abs(mu_new)):
            mu = mu_new
            break
        mu = mu_new
    # nonsymmetric case: use the eigen-residual-consistent quotient
    Ax = A @ x
    mu = float(Ax @ x / (x @ x))
    if x.sum() < 0:
        x = -x
    x = x / np.sqrt(grid.h**2 * np.sum(x * x))
    vals = np.full(grid.shape, np.nan)
    vals[grid.interior] = x
    return mu, ScalarField(grid, vals, grid.interior.copy())


def scaling_check(norm: NormSpec, q: float, lam: float, K: float, r: float, resolution: int,
                  x0=(0.0, 0.0), M: float = 0.0) -> dict:
    """Rescaling identity for Wulff domains.

    Solves on 𝒲_r(x₀) with data (λ, K·r^{−q′}) and on 𝒲 with (λr², K); the
    field r^α·ũ(x₀ + r·x) must reproduce the unit solution.  Both grids are
    built at the same resolution, so x₀ + r·x lands exactly on a node of the
    scaled grid and no interpolation enters the comparison.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    qp = q / (q - 1.0)
    alpha = (2.0 - q) / (q - 1.0)
    dom1 = DomainSpec.wulff(norm, 1.0)
    domr = DomainSpec.wulff(norm, r, x0)
    g1 = build_grid(dom1, resolution)
    gr = build_grid(domr, resolution)
    d1 = distance_fast_march(g1, norm)
    dr = distance_fast_march(gr, norm)
    p1 = ProblemSpec(norm, dom1, q, lam * r**2, SourceSpec(K))
    pr = ProblemSpec(norm, domr, q, lam, SourceSpec(K * r ** (-qp)))
    Mr = M * r ** (-alpha) if np.isfinite(M) else M
    u1, rep1 = solve_truncated(p1, d1, M)
    ur, repr_ = solve_truncated(pr, dr, Mr)
    if g1.shape != gr.shape:
        raise RuntimeError("scaled grids do not match node for node")
    common = g1.interior & gr.interior
    a = u1.values[common]
    b = r**alpha * ur.values[common]
    mismatch = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
    return {
        "r": r,
        "mismatch": mismatch,
        "nodes": int(common.sum()),
        "class_mismatch": int(np.sum(g1.interior != gr.interior)),
        "newton": [rep1.newton_iters, repr_.newton_iters],
    }
