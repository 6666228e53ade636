"""Domains, uniform grids and the anisotropic distance to the boundary."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _march
from .norms import NormSpec, eval_H, eval_polar

__all__ = [
    "Shape",
    "DomainSpec",
    "NodeClass",
    "Grid",
    "ScalarField",
    "DistanceField",
    "GeometryError",
    "MarchError",
    "build_grid",
    "distance_fast_march",
    "distance_bruteforce",
    "extended_distance",
    "smooth_clamp",
    "eikonal_report",
]


class GeometryError(ValueError):
    pass


class MarchError(RuntimeError):
    def __init__(self, node: int, msg: str):
        super().__init__(f"{msg} (node {node})")
        self.node = node


class Shape(str, Enum):
    DISK = "Disk"
    ELLIPSE = "Ellipse"
    WULFF = "WulffOf"


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Disk(R), Ellipse(a, b) (axis aligned) or the Wulff shape r·W of a norm."""

    shape: Shape = Shape.DISK
    radius: float = 1.0
    semi_axes: tuple[float, float] = (1.0, 1.0)
    norm: NormSpec | None = None
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if self.shape is Shape.ELLIPSE:
            if min(self.semi_axes) <= 0:
                raise GeometryError("semi-axes must be positive")
        elif not self.radius > 0:
            raise GeometryError("radius must be positive")
        if self.shape is Shape.WULFF and self.norm is None:
            raise GeometryError("WulffOf needs a norm")

    @classmethod
    def disk(cls, R=1.0, center=(0.0, 0.0)):
        return cls(Shape.DISK, radius=R, center=center)

    @classmethod
    def ellipse(cls, a, b, center=(0.0, 0.0)):
        return cls(Shape.ELLIPSE, semi_axes=(a, b), center=center)

    @classmethod
    def wulff(cls, norm: NormSpec, r=1.0, center=(0.0, 0.0)):
        return cls(Shape.WULFF, radius=r, norm=norm, center=center)

    def to_dict(self) -> dict:
        d = {"shape": self.shape.value, "center": list(self.center)}
        if self.shape is Shape.ELLIPSE:
            d["semi_axes"] = list(self.semi_axes)
        else:
            d["radius"] = self.radius
        if self.shape is Shape.WULFF:
            d["norm"] = self.norm.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        shape = Shape(d["shape"])
        center = tuple(d.get("center", (0.0, 0.0)))
        if shape is Shape.ELLIPSE:
            return cls.ellipse(*d["semi_axes"], center=center)
        if shape is Shape.WULFF:
            return cls.wulff(NormSpec.from_dict(d["norm"]), d.get("radius", 1.0), center)
        return cls.disk(d.get("radius", 1.0), center)

    def __eq__(self, other):
        return isinstance(other, DomainSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(str(self.to_dict()))

    # geometry ------------------------------------------------------------
    def _polar(self, v):
        return eval_polar(self.norm, v, tabulated=True)

    def contains(self, pts) -> np.ndarray:
        """Exact membership in the open domain."""
        v = np.asarray(pts, dtype=float) - np.asarray(self.center)
        if self.shape is Shape.DISK:
            return np.hypot(v[..., 0], v[..., 1]) < self.radius
        if self.shape is Shape.ELLIPSE:
            a, b = self.semi_axes
            return (v[..., 0] / a) ** 2 + (v[..., 1] / b) ** 2 < 1.0
        return self._polar(v) < self.radius

    def boundary(self, t) -> np.ndarray:
        """Boundary point for parameter t ∈ [0, 2π)."""
        t = np.asarray(t, dtype=float)
        e = np.stack([np.cos(t), np.sin(t)], axis=-1)
        if self.shape is Shape.DISK:
            y = self.radius * e
        elif self.shape is Shape.ELLIPSE:
            y = e * np.asarray(self.semi_axes)
        else:
            y = self.radius * e / self._polar(e)[..., None]
        return y + np.asarray(self.center)

    def bbox(self) -> tuple[float, float, float, float]:
        t = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
        y = self.boundary(t)
        cx, cy = self.center
        if self.shape is Shape.DISK:
            R = self.radius
            return cx - R, cx + R, cy - R, cy + R
        if self.shape is Shape.ELLIPSE:
            a, b = self.semi_axes
            return cx - a, cx + a, cy - b, cy + b
        return y[:, 0].min(), y[:, 0].max(), y[:, 1].min(), y[:, 1].max()


class NodeClass(IntEnum):
    INTERIOR = 0
    BOUNDARY_LAYER = 1
    EXTERIOR = 2


@dataclass(eq=False)
class Grid:
    """Uniform node lattice; arrays are indexed ``[iy, ix]``."""

    origin: tuple[float, float]
    h: float
    nx: int
    ny: int
    node_class: np.ndarray
    domain: DomainSpec | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.h * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.h * np.arange(self.ny)

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y)
        return np.stack([X, Y], axis=-1)

    @property
    def interior(self) -> np.ndarray:
        return self.node_class == NodeClass.INTERIOR

    @property
    def boundary_layer(self) -> np.ndarray:
        return self.node_class == NodeClass.BOUNDARY_LAYER

    @property
    def n_interior(self) -> int:
        return int(self.interior.sum())


@dataclass(eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise ValueError("field shape does not match grid")

    @classmethod
    def full(cls, grid: Grid, value: float, mask=None) -> "ScalarField":
        m = grid.interior if mask is None else mask
        v = np.where(m, value, np.nan)
        return cls(grid, v, m)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.mask.copy())

    def to_csv(self, path, extra: dict[str, np.ndarray] | None = None):
        write_field_csv(path, self.grid, {"value": np.where(self.mask, self.values, np.nan), **(extra or {})})


@dataclass(eq=False)
class DistanceField:
    d: ScalarField
    d_signed: ScalarField
    eikonal_residual: np.ndarray
    band_mu: float
    norm: NormSpec | None = None

    @property
    def grid(self) -> Grid:
        return self.d.grid

    @property
    def inradius(self) -> float:
        return float(np.nanmax(np.where(self.d.mask, self.d.values, np.nan)))

    def to_csv(self, path):
        write_field_csv(
            path, self.grid, {"value": self.d_signed.values, "residual": self.eikonal_residual}
        )


def write_field_csv(path, grid: Grid, columns: dict[str, np.ndarray]):
    """Row-major node order (x fastest), '.' decimals, LF endings."""
    pts = grid.points().reshape(-1, 2)
    cols = [np.asarray(c, dtype=float).ravel() for c in columns.values()]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *columns.keys()])
        for k in range(len(pts)):
            w.writerow([repr(float(pts[k, 0])), repr(float(pts[k, 1]))] + [repr(float(c[k])) for c in cols])


# ---------------------------------------------------------------------------


def build_grid(domain: DomainSpec, resolution: int) -> Grid:
    """Grid with ``resolution`` cells across the longer side of the domain's
    bounding box, padded by 3h on each side."""
    if resolution < 16:
        raise GeometryError("resolution must be >= 16")
    xmin, xmax, ymin, ymax = domain.bbox()
    h = max(xmax - xmin, ymax - ymin) / resolution
    nx = int(np.ceil((xmax - xmin) / h - 1e-9)) + 7
    ny = int(np.ceil((ymax - ymin) / h - 1e-9)) + 7
    origin = (xmin - 3 * h, ymin - 3 * h)
    X, Y = np.meshgrid(origin[0] + h * np.arange(nx), origin[1] + h * np.arange(ny))
    inside = domain.contains(np.stack([X, Y], axis=-1))
    if not inside.any():
        raise GeometryError("no interior nodes at this resolution")
    near = ndimage.binary_dilation(inside, structure=ndimage.generate_binary_structure(2, 1))
    cls = np.full(inside.shape, NodeClass.EXTERIOR, dtype=np.int8)
    cls[near & ~inside] = NodeClass.BOUNDARY_LAYER
    cls[inside] = NodeClass.INTERIOR
    _, ncomp = ndimage.label(inside, structure=ndimage.generate_binary_structure(2, 1))
    if ncomp != 1:
        raise GeometryError(f"interior is not 4-connected ({ncomp} components)")
    return Grid(origin, h, nx, ny, cls, domain)


def _polar_fn(norm: NormSpec):
    return lambda v: eval_polar(norm, v, tabulated=True)


def _boundary_distance(domain: DomainSpec, norm: NormSpec, pts: np.ndarray, samples: int,
                       chunk: int = 256) -> np.ndarray:
    """inf over ∂Ω of H°(x − y), by sampling plus golden-section refinement."""
    polar = _polar_fn(norm)
    t = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    Y = domain.boundary(t)
    out = np.empty(len(pts))
    tbest = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        P = pts[s:s + chunk]
        vals = polar(P[:, None, :] - Y[None, :, :])
        k = np.argmin(vals, axis=1)
        tbest[s:s + chunk] = t[k]
        out[s:s + chunk] = vals[np.arange(len(P)), k]
    dt = 2 * np.pi / samples
    lo, hi = tbest - dt, tbest + dt
    g = (np.sqrt(5.0) - 1.0) / 2.0

    def f(tt):
        return polar(pts - domain.boundary(tt))

    c = hi - g * (hi - lo)
    d = lo + g * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(40):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c_new = hi - g * (hi - lo)
        d_new = lo + g * (hi - lo)
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        fc_old, fd_old = fc, fd
        fc = np.where(left, f(c), fd_old)
        fd = np.where(left, fc_old, f(d))
    return np.minimum(out, np.minimum(fc, fd))


def _eikonal_residual(grid: Grid, ds: np.ndarray, norm: NormSpec) -> np.ndarray:
    """|H(∇_h d) − 1| by centered differences on Interior nodes with d ≥ 2h;
    nodes where d has a local maximum along an axis (ridge) are left NaN."""
    h = grid.h
    res = np.full(grid.shape, np.nan)
    core = np.zeros(grid.shape, dtype=bool)
    core[1:-1, 1:-1] = True
    ok = grid.interior & core & (ds >= 2 * h)
    dx = np.zeros(grid.shape)
    dy = np.zeros(grid.shape)
    dx[:, 1:-1] = (ds[:, 2:] - ds[:, :-2]) / (2 * h)
    dy[1:-1, :] = (ds[2:, :] - ds[:-2, :]) / (2 * h)
    fx = np.zeros(grid.shape, dtype=bool)
    fy = np.zeros(grid.shape, dtype=bool)
    c = ds[1:-1, 1:-1]
    ridge = np.zeros(grid.shape, dtype=bool)
    rx = (ds[1:-1, 2:] - c) * (c - ds[1:-1, :-2]) <= 0
    ry = (ds[2:, 1:-1] - c) * (c - ds[:-2, 1:-1]) <= 0
    ridge[1:-1, 1:-1] = rx | ry
    ok &= ~ridge
    g = np.stack([dx[ok], dy[ok]], axis=-1)
    res[ok] = np.abs(eval_H(norm, g) - 1.0)
    del fx, fy
    return res


def _make_field(grid, norm, d_in, d_out, band_fraction):
    interior = grid.interior
    ds = np.where(interior, d_in, -d_out)
    d = ScalarField(grid, np.where(interior, d_in, np.nan), interior)
    dsf = ScalarField(grid, ds, np.ones(grid.shape, dtype=bool))
    res = _eikonal_residual(grid, ds, norm)
    inrad = float(d_in[interior].max())
    return DistanceField(d, dsf, res, band_fraction * inrad, norm)


def distance_fast_march(grid: Grid, norm: NormSpec, band_fraction: float = 0.25,
                        init_samples: int = 4096) -> DistanceField:
    """d_H inside and the outside distance (negated) by fast marching.

    Nodes within one cell of ∂Ω are initialised with the exact distance to
    the analytic boundary; the rest are filled by a heap-ordered sweep with the
    8-neighbour Hopf–Lax update d(x) = min_y [d(y) + H°(x − y)].
    """
    domain = grid.domain
    if domain is None:
        raise GeometryError("grid has no domain attached")
    interior = grid.interior
    s8 = ndimage.generate_binary_structure(2, 2)
    ring_in = interior & ndimage.binary_dilation(~interior, structure=s8)
    ring_out = ~interior & ndimage.binary_dilation(interior, structure=s8)
    pts = grid.points()
    ring = ring_in | ring_out
    exact = np.zeros(grid.shape)
    exact[ring] = _boundary_distance(domain, norm, pts[ring], init_samples)

    A = norm.quadratic_matrix
    if A is not None:
        mode, ainv, table = 0, np.linalg.inv(A), np.zeros(2)
    else:
        mode, ainv = 1, np.zeros((2, 2))
        th = np.linspace(0.0, 2 * np.pi, 8193)
        table = norm.polar_table(th)
    out = {}
    for name, known, region in (("in", ring_in, interior), ("out", ring_out, ~interior)):
        d = np.where(known, exact, np.inf)
        bad = _march.march(d, known, region & ~known, grid.h, mode, ainv, table)
        if bad >= 0:
            raise MarchError(int(bad), "local update did not produce a finite value")
        out[name] = d
    return _make_field(grid, norm, out["in"], out["out"], band_fraction)


def distance_bruteforce(grid: Grid, norm: NormSpec, boundary_samples: int = 4096,
                        band_fraction: float = 0.25) -> DistanceField:
    """Direct minimization of H°(x − y) over a dense sampling of ∂Ω."""
    if boundary_samples < 256:
        raise GeometryError("boundary_samples must be >= 256")
    pts = grid.points().reshape(-1, 2)
    dist = _boundary_distance(grid.domain, norm, pts, boundary_samples).reshape(grid.shape)
    return _make_field(grid, norm, dist, dist, band_fraction)


def smooth_clamp(t, delta0: float) -> np.ndarray:
    """Odd C² clamp: identity on |t| ≤ δ₀/2, quintic blend, ±δ₀ beyond δ₀."""
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    s = np.clip((a - 0.5 * delta0) / (0.5 * delta0), 0.0, 1.0)
    blend = 0.5 * delta0 + 0.5 * delta0 * (s + 4 * s**3 - 7 * s**4 + 3 * s**5)
    out = np.where(a <= 0.5 * delta0, a, np.where(a >= delta0, delta0, blend))
    return np.sign(t) * out


def extended_distance(dist: DistanceField, delta0: float) -> ScalarField:
    """C² surrogate d(x): equal to the signed distance near ∂Ω and clamped
    to ±δ₀ away from it."""
    if not 0 < delta0 < dist.band_mu:
        raise GeometryError(f"delta0 must lie in (0, band_mu={dist.band_mu:.4g})")
    ds = dist.d_signed
    return ScalarField(ds.grid, smooth_clamp(ds.values, delta0), ds.mask.copy())


def eikonal_report(dist: DistanceField) -> dict:
    r = dist.eikonal_residual
    vals = r[np.isfinite(r)]
    if vals.size == 0:
        return {"median": float("nan"), "p95": float("nan"), "max": float("nan"), "count": 0}
    return {
        "median": float(np.median(vals)),
        "p95": float(np.percentile(vals, 95)),
        "max": float(vals.max()),
        "count": int(vals.size),
    }
