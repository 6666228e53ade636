"""Smooth anisotropic norms H, their polar H°, and the Wulff shape.

All evaluation functions are vectorized over a trailing axis of length 2, so
``xi`` may be a single 2-vector or an array of shape ``(..., 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "Family",
    "NormSpec",
    "NormReport",
    "eval_H",
    "grad_H",
    "flux",
    "hess_H2",
    "eval_polar",
    "grad_polar",
    "polar_of",
    "estimate_constants",
    "wulff_contains",
    "identity_suite",
]

SWEEP_ANGLES = 720
GOLDEN_STEPS = 30
_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


class Family(str, Enum):
    EUCLIDEAN = "Euclidean"
    ELLIPSE = "Ellipse"
    SMOOTHED_LP = "SmoothedLp"


@dataclass(frozen=True, eq=False)
class NormSpec:
    """A norm family with its parameters.

    ``Ellipse`` is H(ξ) = sqrt(ξ·Aξ). ``SmoothedLp`` is
    (Σ_i (ξ_i² + eps|ξ|²)^{p/2})^{1/p}, rescaled so that H(e₁) = 1.
    """

    family: Family = Family.EUCLIDEAN
    A: np.ndarray | None = None
    p: float = 2.0
    eps_smooth: float = 0.0

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        if fam is Family.ELLIPSE:
            if self.A is None:
                raise ValueError("Ellipse norm needs a matrix A")
            A = np.array(self.A, dtype=float).reshape(2, 2)
            if not np.allclose(A, A.T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
                raise ValueError("Ellipse matrix A must be symmetric")
            A = 0.5 * (A + A.T)
            if np.linalg.eigvalsh(A).min() <= 0:
                raise ValueError("Ellipse matrix A must be positive definite")
            A.setflags(write=False)
            object.__setattr__(self, "A", A)
        elif fam is Family.SMOOTHED_LP:
            if not self.p > 1:
                raise ValueError("SmoothedLp needs p > 1")
            if self.eps_smooth < 0:
                raise ValueError("eps_smooth must be >= 0")
            if self.p != 2 and self.eps_smooth <= 0:
                raise ValueError("SmoothedLp with p != 2 needs eps_smooth > 0")
            object.__setattr__(self, "A", None)
        else:
            object.__setattr__(self, "A", None)

    # construction helpers -------------------------------------------------
    @classmethod
    def euclidean(cls) -> "NormSpec":
        return cls(Family.EUCLIDEAN)

    @classmethod
    def ellipse(cls, A) -> "NormSpec":
        return cls(Family.ELLIPSE, A=np.asarray(A, dtype=float))

    @classmethod
    def smoothed_lp(cls, p: float, eps_smooth: float) -> "NormSpec":
        return cls(Family.SMOOTHED_LP, p=float(p), eps_smooth=float(eps_smooth))

    def to_dict(self) -> dict:
        if self.family is Family.ELLIPSE:
            params = [float(v) for v in self.A.ravel()]
        elif self.family is Family.SMOOTHED_LP:
            params = [float(self.p), float(self.eps_smooth)]
        else:
            params = []
        return {"family": self.family.value, "params": params}

    @classmethod
    def from_dict(cls, data: dict) -> "NormSpec":
        fam = Family(data["family"])
        params = list(data.get("params", []))
        if fam is Family.ELLIPSE:
            if len(params) != 4:
                raise ValueError("Ellipse params are the 4 entries of A, row-major")
            return cls.ellipse(np.reshape(params, (2, 2)))
        if fam is Family.SMOOTHED_LP:
            if len(params) != 2:
                raise ValueError("SmoothedLp params are [p, eps_smooth]")
            return cls.smoothed_lp(*params)
        return cls.euclidean()

    def scaled(self, t: float) -> "NormSpec":
        """The norm t·H (only closed-form families)."""
        if self.family is Family.ELLIPSE:
            return NormSpec.ellipse(t * t * self.A)
        if self.family is Family.EUCLIDEAN:
            return NormSpec.ellipse(t * t * np.eye(2))
        raise ValueError("scaling is only supported for closed-form families")

    def __eq__(self, other):
        if not isinstance(other, NormSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(str(self.to_dict()))

    def __repr__(self):
        d = self.to_dict()
        return f"NormSpec({d['family']}, {d['params']})"

    @property
    def closed_form(self) -> bool:
        return self.family is not Family.SMOOTHED_LP

    @property
    def quadratic_matrix(self) -> np.ndarray | None:
        """A with H² = ξ·Aξ, for the closed-form families."""
        if self.family is Family.EUCLIDEAN:
            return np.eye(2)
        if self.family is Family.ELLIPSE:
            return self.A
        return None

    @cached_property
    def _lp_scale(self) -> float:
        p, e = self.p, self.eps_smooth
        return ((1 + e) ** (p / 2) + e ** (p / 2)) ** (1.0 / p)

    @cached_property
    def polar_table(self) -> CubicSpline | None:
        """Periodic spline of H°(cos θ, sin θ), used for bulk polar queries."""
        if self.closed_form:
            return None
        theta = np.linspace(0.0, 2 * np.pi, 2049)
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        vals = _numeric_polar(self, dirs)
        vals[-1] = vals[0]
        return CubicSpline(theta, vals, bc_type="periodic")


@dataclass
class NormReport:
    a_lower: float
    b_upper: float
    gamma_est: float
    sample_count: int


# ---------------------------------------------------------------------------
# H and its derivatives


def _as_xi(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 2:
        raise ValueError("last axis must have length 2")
    return xi


def _lp_parts(spec: NormSpec, xi: np.ndarray):
    p, e = spec.p, spec.eps_smooth
    r2 = np.sum(xi * xi, axis=-1, keepdims=True)
    s = xi * xi + e * r2
    S = np.sum(s ** (p / 2), axis=-1)
    return p, e, s, S


def eval_H(spec: NormSpec, xi) -> np.ndarray:
    """H(ξ); zero at the origin."""
    xi = _as_xi(xi)
    A = spec.quadratic_matrix
    if A is not None:
        q = np.einsum("...i,ij,...j->...", xi, A, xi)
        return np.sqrt(np.maximum(q, 0.0))
    p, _, _, S = _lp_parts(spec, xi)
    return S ** (1.0 / p) / spec._lp_scale


def flux(spec: NormSpec, xi) -> np.ndarray:
    """H(ξ) H_ξ(ξ) = ½∇(H²); continuous, and zero at ξ = 0."""
    xi = _as_xi(xi)
    A = spec.quadratic_matrix
    if A is not None:
        return xi @ A.T
    p, e, s, S = _lp_parts(spec, xi)
    out = np.zeros_like(xi)
    nz = S > 0
    if np.any(nz):
        sn, Sn, xn = s[nz], S[nz], xi[nz]
        T = np.sum(sn ** (p / 2 - 1), axis=-1, keepdims=True)
        v = sn ** (p / 2 - 1) * xn + e * xn * T
        out[nz] = (Sn ** (2.0 / p - 1))[..., None] * v / spec._lp_scale**2
    return out


def _check_nonzero(xi: np.ndarray, what: str):
    if np.any(np.sum(xi * xi, axis=-1) == 0):
        raise ValueError(f"{what} is undefined at the origin")


def grad_H(spec: NormSpec, xi) -> np.ndarray:
    """H_ξ(ξ) for ξ ≠ 0 (0-homogeneous, odd)."""
    xi = _as_xi(xi)
    _check_nonzero(xi, "grad_H")
    return flux(spec, xi) / eval_H(spec, xi)[..., None]


def hess_H2(spec: NormSpec, xi) -> np.ndarray:
    """½∇²(H²) at ξ ≠ 0, shape (..., 2, 2)."""
    xi = _as_xi(xi)
    _check_nonzero(xi, "hess_H2")
    return _hess_H2_unchecked(spec, xi)


def _hess_H2_unchecked(spec: NormSpec, xi: np.ndarray) -> np.ndarray:
    A = spec.quadratic_matrix
    if A is not None:
        return np.broadcast_to(A, xi.shape[:-1] + (2, 2)).copy()
    p, e, s, S = _lp_parts(spec, xi)
    T = np.sum(s ** (p / 2 - 1), axis=-1)
    U = np.sum(s ** (p / 2 - 2), axis=-1)
    v = s ** (p / 2 - 1) * xi + e * xi * T[..., None]
    eye = np.eye(2)
    sk2 = s ** (p / 2 - 2)
    # dv_k/dξ_l
    dv = (
        (p - 2) * (sk2 * xi)[..., :, None] * (xi[..., :, None] * eye + e * xi[..., None, :])
        + (s ** (p / 2 - 1) + e * T[..., None])[..., :, None] * eye
        + (p - 2) * e * xi[..., :, None] * (sk2 * xi + e * xi * U[..., None])[..., None, :]
    )
    Sg = S[..., None, None]
    out = (2 - p) * Sg ** (2.0 / p - 2) * v[..., :, None] * v[..., None, :] + Sg ** (2.0 / p - 1) * dv
    return out / spec._lp_scale**2


# ---------------------------------------------------------------------------
# polar norm


def polar_of(func, x, sweep: int = SWEEP_ANGLES, steps: int = GOLDEN_STEPS) -> np.ndarray:
    """sup over unit directions e of (e·x)/func(e), vectorized over x.

    ``func`` maps an (m, 2) array of directions to m positive values.  The
    sweep picks the best direction, then golden-section search refines it
    within one sweep cell on each side.
    """
    x = _as_xi(x)
    shape = x.shape[:-1]
    xf = x.reshape(-1, 2)
    theta = np.linspace(0.0, 2 * np.pi, sweep, endpoint=False)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    denom = func(dirs)
    ratios = (xf @ dirs.T) / denom
    best = np.argmax(ratios, axis=1)
    dt = 2 * np.pi / sweep
    lo = theta[best] - dt
    hi = theta[best] + dt

    def obj(t):
        e = np.stack([np.cos(t), np.sin(t)], axis=-1)
        return np.sum(e * xf, axis=-1) / func(e)

    c = hi - _GOLD * (hi - lo)
    d = lo + _GOLD * (hi - lo)
    fc, fd = obj(c), obj(d)
    for _ in range(steps):
        left = fc > fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c_new = hi - _GOLD * (hi - lo)
        d_new = lo + _GOLD * (hi - lo)
        # reuse the surviving interior point
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        fc_old, fd_old = fc, fd
        fc = np.where(left, obj(c), fd_old)
        fd = np.where(left, fc_old, obj(d))
    val = np.maximum(np.maximum(fc, fd), ratios[np.arange(len(xf)), best])
    val = np.where(np.sum(xf * xf, axis=-1) == 0, 0.0, val)
    return val.reshape(shape)


def _numeric_polar(spec: NormSpec, x) -> np.ndarray:
    return polar_of(lambda e: eval_H(spec, e), x)


def eval_polar(spec: NormSpec, x, tabulated: bool = False) -> np.ndarray:
    """H°(x) = sup_{ξ≠0} ξ·x / H(ξ).

    Closed form for Euclidean and Ellipse.  For SmoothedLp the default is the
    direct numerical maximization; ``tabulated=True`` uses a periodic spline
    of the unit-circle values instead, for bulk queries such as distance
    computations.
    """
    x = _as_xi(x)
    A = spec.quadratic_matrix
    if A is not None:
        Ainv = np.linalg.inv(A)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, Ainv, x), 0.0))
    if tabulated:
        r = np.hypot(x[..., 0], x[..., 1])
        theta = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
        return r * spec.polar_table(theta)
    return _numeric_polar(spec, x)


def grad_polar(spec: NormSpec, x) -> np.ndarray:
    """∇H°(x) for x ≠ 0; closed form or central differences."""
    x = _as_xi(x)
    _check_nonzero(x, "grad_polar")
    A = spec.quadratic_matrix
    if A is not None:
        Ainv = np.linalg.inv(A)
        y = x @ Ainv.T
        return y / eval_polar(spec, x)[..., None]
    step = 1e-4 * np.hypot(x[..., 0], x[..., 1])[..., None]
    out = np.empty_like(x)
    for k in range(2):
        e = np.zeros(2)
        e[k] = 1.0
        fp = eval_polar(spec, x + step * e)
        fm = eval_polar(spec, x - step * e)
        out[..., k] = (fp - fm) / (2 * step[..., 0])
    return out


# ---------------------------------------------------------------------------
# diagnostics


def estimate_constants(spec: NormSpec, samples: int = 4096) -> NormReport:
    """Structural constants a ≤ H/|ξ| ≤ b and γ from the unit circle."""
    if samples < 64:
        raise ValueError("need at least 64 samples")
    theta = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    e = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    h = eval_H(spec, e)
    lam = np.linalg.eigvalsh(hess_H2(spec, e))[:, 0]
    return NormReport(float(h.min()), float(h.max()), float(lam.min()), samples)


def wulff_contains(spec: NormSpec, x, r: float, x0=(0.0, 0.0)) -> np.ndarray:
    """Membership in the open Wulff shape W_r(x0) = {H°(x − x0) < r}."""
    if not r > 0:
        raise ValueError("radius must be positive")
    x = _as_xi(x)
    return eval_polar(spec, x - np.asarray(x0, dtype=float)) < r


# ---------------------------------------------------------------------------
# identity suite

NUMERIC_TOL = 1e-6
CLOSED_TOL = 1e-8


def _random_vectors(rng, n):
    r = 10.0 ** rng.uniform(-2, 2, n)
    t = rng.uniform(0, 2 * np.pi, n)
    return r[:, None] * np.stack([np.cos(t), np.sin(t)], axis=-1)


def identity_suite(spec: NormSpec, samples: int = 1000, seed: int = 0) -> dict:
    """Largest violation of each structural identity over random inputs.

    Returns ``{"violations": {name: value}, "ellipticity": smallest Hessian
    eigenvalue of H²/2 on the unit circle, "tolerance": tol, "passed": bool}``.
    Violations are relative where the identity is scale dependent.
    """
    rng = np.random.default_rng(seed)
    xi = _random_vectors(rng, samples)
    t = rng.uniform(-10, 10, samples)
    t = np.where(np.abs(t) < 1e-3, 1.0, t)
    H = eval_H(spec, xi)
    nrm = np.hypot(xi[:, 0], xi[:, 1])
    out = {}
    out["homogeneity"] = float(np.max(np.abs(eval_H(spec, t[:, None] * xi) - np.abs(t) * H) / (1 + np.abs(t) * H)))
    g = grad_H(spec, xi)
    out["euler"] = float(np.max(np.abs(np.sum(g * xi, axis=-1) - H) / (1 + nrm)))
    out["zero_homogeneity"] = float(np.max(np.abs(grad_H(spec, t[:, None] * xi) - np.sign(t)[:, None] * g)))
    step = 1e-6 * nrm
    fd = np.stack(
        [
            (eval_H(spec, xi + step[:, None] * e) - eval_H(spec, xi - step[:, None] * e)) / (2 * step)
            for e in np.eye(2)
        ],
        axis=-1,
    )
    out["gradient_fd"] = float(np.max(np.linalg.norm(fd - g, axis=-1) / np.linalg.norm(g, axis=-1)))
    lam_min = np.linalg.eigvalsh(hess_H2(spec, xi / nrm[:, None]))[:, 0]
    out["hessian_min_eig"] = float(lam_min.min())
    x = _random_vectors(rng, samples)
    gp = grad_polar(spec, x)
    P = eval_polar(spec, x)
    out["polar_unit"] = float(np.max(np.abs(eval_H(spec, gp) - 1.0)))
    hh0 = P[:, None] * grad_H(spec, gp)
    out["hh0"] = float(np.max(np.linalg.norm(hh0 - x, axis=-1) / np.linalg.norm(x, axis=-1)))
    k = min(samples, 200)
    if spec.closed_form:
        bi = polar_of(lambda e: eval_polar(spec, e), xi[:k])
    else:
        bi = polar_of(lambda e: eval_polar(spec, e, tabulated=True), xi[:k])
    out["biduality"] = float(np.max(np.abs(bi - H[:k]) / H[:k]))
    tol = CLOSED_TOL if spec.closed_form else NUMERIC_TOL
    checks = {k2: v for k2, v in out.items() if k2 != "hessian_min_eig"}
    passed = all(v <= tol for v in checks.values()) and out["hessian_min_eig"] > 0
    return {
        "violations": checks,
        "ellipticity": out["hessian_min_eig"],
        "tolerance": tol,
        "passed": bool(passed),
        "samples": samples,
    }
