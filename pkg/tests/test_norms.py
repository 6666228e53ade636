import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finsler_blowup.norms import (
    NormSpec,
    eval_H,
    eval_polar,
    estimate_constants,
    flux,
    grad_H,
    grad_polar,
    hess_H2,
    identity_suite,
    wulff_contains,
)

NORMS = [
    NormSpec.euclidean(),
    NormSpec.ellipse([[2.0, 0.5], [0.5, 1.0]]),
    NormSpec.smoothed_lp(4.0, 0.05),
    NormSpec.smoothed_lp(1.5, 0.1),
]

coord = st.floats(-50, 50, allow_nan=False)
vec = st.tuples(coord, coord).filter(lambda v: np.hypot(*v) > 1e-3)


def test_euclidean_values():
    e = NormSpec.euclidean()
    assert eval_H(e, [3.0, 4.0]) == pytest.approx(5.0, abs=1e-14)
    assert eval_H(NormSpec.ellipse(np.eye(2)), [3.0, 4.0]) == pytest.approx(5.0, abs=1e-14)
    np.testing.assert_allclose(grad_H(e, [0.0, 2.0]), [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(hess_H2(e, [1.3, -0.2]), np.eye(2), atol=1e-14)
    assert eval_polar(e, [3.0, 4.0]) == pytest.approx(5.0, abs=1e-14)
    np.testing.assert_allclose(grad_polar(e, [0.0, 5.0]), [0.0, 1.0], atol=1e-15)


def test_ellipse_polar_closed_form():
    A = np.array([[4.0, 0.0], [0.0, 1.0]])
    n = NormSpec.ellipse(A)
    x = np.array([0.7, -1.1])
    assert eval_polar(n, x) == pytest.approx(np.sqrt(x @ np.linalg.solve(A, x)), rel=1e-14)


def test_zero_vector():
    n = NormSpec.smoothed_lp(4.0, 0.05)
    assert eval_H(n, [0.0, 0.0]) == 0.0
    np.testing.assert_array_equal(flux(n, [0.0, 0.0]), [0.0, 0.0])
    with pytest.raises(ValueError):
        grad_H(n, [0.0, 0.0])


@pytest.mark.parametrize(
    "bad",
    [
        lambda: NormSpec.ellipse([[1.0, 2.0], [2.0, 1.0]]),
        lambda: NormSpec.ellipse([[1.0, 0.3], [0.0, 1.0]]),
        lambda: NormSpec.smoothed_lp(1.0, 0.1),
        lambda: NormSpec.smoothed_lp(3.0, -0.1),
    ],
)
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        bad()


@pytest.mark.parametrize("n", NORMS, ids=repr)
def test_roundtrip_dict(n):
    assert NormSpec.from_dict(n.to_dict()) == n


@settings(max_examples=200, deadline=None)
@given(xi=vec, t=st.floats(-20, 20).filter(lambda t: abs(t) > 1e-3))
def test_homogeneity_and_euler(xi, t):
    for n in NORMS:
        xi_ = np.array(xi)
        H = eval_H(n, xi_)
        assert eval_H(n, t * xi_) == pytest.approx(abs(t) * H, rel=1e-12)
        assert grad_H(n, xi_) @ xi_ == pytest.approx(H, rel=1e-10)
        np.testing.assert_allclose(grad_H(n, t * xi_), np.sign(t) * grad_H(n, xi_), atol=1e-12)
        np.testing.assert_allclose(flux(n, xi_), H * grad_H(n, xi_), rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(x=vec)
def test_duality_closed_forms(x):
    for n in NORMS[:2]:
        x_ = np.array(x)
        g = grad_polar(n, x_)
        assert eval_H(n, g) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(eval_polar(n, x_) * grad_H(n, g), x_, rtol=1e-10, atol=1e-10)


def test_polar_numeric_matches_spline():
    n = NormSpec.smoothed_lp(4.0, 0.05)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    np.testing.assert_allclose(eval_polar(n, x, tabulated=True), eval_polar(n, x), rtol=1e-7)


def test_constants_bracket_H():
    n = NormSpec.ellipse(np.diag([4.0, 1.0]))
    rep = estimate_constants(n, 2048)
    assert rep.a_lower == pytest.approx(1.0, rel=1e-4)
    assert rep.b_upper == pytest.approx(2.0, rel=1e-4)
    assert rep.gamma_est > 0
    assert estimate_constants(NormSpec.euclidean()).gamma_est == pytest.approx(1.0, rel=1e-10)


def test_wulff_contains_open_set():
    e = NormSpec.euclidean()
    assert wulff_contains(e, [0.5, 0.0], 1.0)
    assert not wulff_contains(e, [1.0, 0.0], 1.0)
    n = NormSpec.ellipse(np.diag([4.0, 1.0]))
    # the Wulff shape of diag(4,1) has semi-axes 2 and 1
    assert wulff_contains(n, [1.9, 0.0], 1.0)
    assert not wulff_contains(n, [0.0, 1.01], 1.0)
    with pytest.raises(ValueError):
        wulff_contains(e, [0.0, 0.0], 0.0)


@pytest.mark.parametrize("name", ["Euclidean", "Ellipse", "SmoothedLp"])
def test_identity_suite(norm_families, name):
    rep = identity_suite(norm_families[name], samples=1000, seed=0)
    assert rep["passed"], rep
    assert rep["ellipticity"] > 0
    if name == "Euclidean":
        # everything except the finite-difference gradient check is exact
        assert max(v for k, v in rep["violations"].items() if k != "gradient_fd") <= 1e-10
