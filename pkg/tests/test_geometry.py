import csv

import numpy as np
import pytest

from finsler_blowup.geometry import (
    DomainSpec,
    GeometryError,
    NodeClass,
    build_grid,
    distance_bruteforce,
    distance_fast_march,
    eikonal_report,
    extended_distance,
    smooth_clamp,
)
from finsler_blowup.norms import NormSpec


def test_grid_spacing_and_classes(disk):
    g = build_grid(disk, 64)
    assert g.h == pytest.approx(2.0 / 64)
    assert g.n_interior > 0
    # every BoundaryLayer node touches an Interior node
    cls = g.node_class
    bl = np.argwhere(cls == NodeClass.BOUNDARY_LAYER)
    for j, i in bl[:50]:
        nb = cls[j - 1:j + 2, i - 1:i + 2]
        assert (nb == NodeClass.INTERIOR).any()
    assert not g.interior[0].any() and not g.interior[-1].any()


def test_resolution_floor(disk):
    with pytest.raises(GeometryError):
        build_grid(disk, 8)


def test_wulff_of_euclidean_is_disk(disk):
    w = DomainSpec.wulff(NormSpec.euclidean(), 1.0)
    np.testing.assert_array_equal(build_grid(w, 48).node_class, build_grid(disk, 48).node_class)


def test_domain_roundtrip():
    for d in (DomainSpec.disk(0.5, (0.1, 0.2)), DomainSpec.ellipse(1.0, 0.5),
              DomainSpec.wulff(NormSpec.ellipse(np.diag([4.0, 1.0])), 0.7)):
        assert DomainSpec.from_dict(d.to_dict()) == d


def test_center_distance(disk64):
    g = disk64.grid
    c = np.unravel_index(np.argmin(np.hypot(*np.moveaxis(g.points(), -1, 0))), g.shape)
    assert abs(disk64.d.values[c] - 1.0) <= 2 * g.h


def test_bruteforce_exact_for_disk(euclid):
    dom = DomainSpec.disk(0.8, (0.1, -0.2))
    g = build_grid(dom, 32)
    bf = distance_bruteforce(g, euclid, boundary_samples=4096)
    r = np.hypot(g.points()[..., 0] - 0.1, g.points()[..., 1] + 0.2)
    I = g.interior
    np.testing.assert_allclose(bf.d.values[I], 0.8 - r[I], atol=1e-4)


@pytest.mark.parametrize("A", [np.eye(2), np.diag([4.0, 1.0])])
@pytest.mark.parametrize("dom", [DomainSpec.disk(1.0), DomainSpec.ellipse(1.0, 0.6)])
def test_fast_march_vs_bruteforce(A, dom):
    n = NormSpec.ellipse(A)
    g = build_grid(dom, 48)
    fm = distance_fast_march(g, n)
    bf = distance_bruteforce(g, n)
    I = g.interior
    assert np.max(np.abs(fm.d.values[I] - bf.d.values[I])) <= 2 * g.h
    assert np.all(fm.d.values[I] > 0)
    assert np.all(fm.d_signed.values[~I] <= 0)


def test_eikonal_residual_small(disk64):
    rep = eikonal_report(disk64)
    assert rep["count"] > 100
    assert rep["median"] <= 0.05


def test_smooth_clamp_properties():
    d0 = 0.2
    t = np.linspace(-0.5, 0.5, 2001)
    c = smooth_clamp(t, d0)
    np.testing.assert_allclose(c, -smooth_clamp(-t, d0), atol=1e-15)
    inner = np.abs(t) <= d0 / 2
    np.testing.assert_allclose(c[inner], t[inner])
    assert np.all(np.abs(c) <= d0 + 1e-15)
    assert np.all(np.diff(c) >= -1e-15)
    # C² at the joins: second differences stay bounded
    dd = np.diff(c, 2) / (t[1] - t[0]) ** 2
    assert np.max(np.abs(dd)) < 100


def test_extended_distance_band(disk64):
    ext = extended_distance(disk64, 0.2)
    near = disk64.grid.interior & (disk64.d.values <= 0.1)
    np.testing.assert_allclose(ext.values[near], disk64.d.values[near])
    with pytest.raises(GeometryError):
        extended_distance(disk64, 0.3)


def test_csv_format(tmp_path, disk32):
    p = tmp_path / "d.csv"
    disk32.to_csv(p)
    raw = p.read_bytes()
    assert b"\r\n" not in raw
    rows = list(csv.reader(p.open(encoding="utf-8")))
    assert rows[0] == ["x", "y", "value", "residual"]
    assert len(rows) - 1 == disk32.grid.nx * disk32.grid.ny
    assert "," not in rows[1][0]
