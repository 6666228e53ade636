import numpy as np
import pytest

from finsler_blowup.ergodic import (
    RegimeError,
    default_x0,
    ergodic_constant_uniqueness_probe,
    ergodic_continuation,
    exp_transform_check,
    rayleigh_minimize,
    rayleigh_quotient,
)
from finsler_blowup.geometry import ScalarField
from finsler_blowup.norms import NormSpec
from finsler_blowup.oracles import dense_dirichlet_eigen
from finsler_blowup.pde import ProblemSpec, SourceSpec, _discretization

SHORT = [2.0**-k for k in range(9)]


@pytest.fixture(scope="module")
def q2_run(disk64):
    p = ProblemSpec(NormSpec.euclidean(), disk64.grid.domain, 2.0, 1.0)
    return p, ergodic_continuation(p, disk64, SHORT)


def test_default_x0_is_centre(disk64):
    k = default_x0(disk64)
    assert disk64.d.values.flat[k] == pytest.approx(disk64.inradius)


def test_regime_gate(disk32):
    p = ProblemSpec(NormSpec.euclidean(), disk32.grid.domain, 1.5, 1.0, SourceSpec(0.0, 1.0, 3.0))
    with pytest.raises(RegimeError):
        ergodic_continuation(p, disk32, SHORT)


def test_schedule_must_decrease(disk32):
    p = ProblemSpec(NormSpec.euclidean(), disk32.grid.domain, 2.0, 1.0)
    with pytest.raises(ValueError):
        ergodic_continuation(p, disk32, [0.5, 1.0])


def test_continuation_matches_linear_oracle(disk64, q2_run):
    _, res = q2_run
    mu, _ = dense_dirichlet_eigen(disk64.grid, dist=disk64)
    assert abs(res.u0 - mu) / mu < 0.01
    assert res.converged
    # λ·v shrinks along the schedule and the trace approaches u₀
    assert res.lam_v_sup[-1] < res.lam_v_sup[0]
    ts = [t for _, t in res.lambda_trace]
    assert abs(ts[-1] - res.u0) < abs(ts[0] - res.u0)
    assert res.v.values.flat[res.x0] == 0.0


def test_rayleigh_and_transform(disk64, q2_run):
    p, res = q2_run
    eig = rayleigh_minimize(p.norm, p.domain, disk64, p.source)
    assert eig.converged
    assert all(b <= a + 1e-12 for a, b in zip(eig.rayleigh_history, eig.rayleigh_history[1:]))
    assert abs(eig.u0 - res.u0) / eig.u0 < 0.01
    tr = exp_transform_check(res.v, eig.w, disk64)
    assert tr["relative"] < 0.05


def test_rayleigh_quotient_of_constant_shift(disk32):
    D = _discretization(disk32.grid, disk32, "ghost")
    psi = D.gather(np.where(disk32.grid.interior, disk32.d.values, 0.0))
    R0 = rayleigh_quotient(psi, D, NormSpec.euclidean(), np.zeros(D.n))
    R1 = rayleigh_quotient(psi, D, NormSpec.euclidean(), np.full(D.n, 3.0))
    assert R1 == pytest.approx(R0 + 3.0)


def test_transform_check_rejects_nonpositive(disk32):
    I = disk32.grid.interior
    v = ScalarField(disk32.grid, np.where(I, 0.0, np.nan), I)
    w = ScalarField(disk32.grid, np.where(I, -1.0, np.nan), I)
    with pytest.raises(ValueError):
        exp_transform_check(v, w, disk32)


def test_uniqueness_probe(disk64, q2_run):
    p, res = q2_run
    probe = ergodic_constant_uniqueness_probe(p, disk64, res.u0, [0.0, 0.2 * res.u0], res.v,
                                              lam_floor=SHORT[-1])
    base, other = probe["probes"][0]["residual"], probe["probes"][1]["residual"]
    assert base < other
    assert other == pytest.approx(0.2 * res.u0, rel=0.05)
