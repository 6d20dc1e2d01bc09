import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nsmix.control import (
    ControlOperator,
    FeedbackController,
    assemble_A,
    assemble_A_adjoint,
    assemble_L,
    build_phi,
    calibrate_d,
    closed_form_phi,
    observability_check,
    parameter_sweep,
    phi_batch,
    quadratic_gradient,
    quadratic_objective,
    reference_flow,
    solve_quadratic_min,
    verify_contraction,
)
from nsmix.exceptions import ConfigurationError, GridMismatchError
from nsmix.spectral import SpectralVelocity

NU, DT = 0.5, 1e-2


@pytest.fixture(scope="module")
def ref4(h4, uhat4):
    return reference_flow(h4, uhat4, NU, DT)


@pytest.fixture(scope="module")
def LA4(ref4, basis4):
    return assemble_L(ref4), assemble_A(ref4, basis4, 12)


def test_forward_and_adjoint_assembly_agree(ref4, basis4, LA4):
    L, A = LA4
    A_rows, L_rows = assemble_A_adjoint(ref4, basis4, 12)
    np.testing.assert_allclose(A_rows, A.matrix, atol=1e-12 * np.abs(A.matrix).max())
    np.testing.assert_allclose(L_rows, L.matrix, atol=1e-12 * np.abs(L.matrix).max())


def test_L_is_derivative_of_time_one_map(h4, uhat4, LA4, grid4, rng):
    from nsmix.solver import time_one_map

    L, _ = LA4
    v = SpectralVelocity.random(grid4, rng)
    eps = 1e-6
    fd = (time_one_map(uhat4 + v * eps, h4, NU, DT).to_real() - time_one_map(uhat4 - v * eps, h4, NU, DT).to_real()) / (2 * eps)
    assert np.linalg.norm(L @ v.to_real() - fd) / np.linalg.norm(fd) < 1e-3


def test_gradient_matches_central_differences(LA4, grid4, rng):
    L, A = LA4
    P = grid4.pi_real_indices(4)
    for _ in range(5):
        c = rng.standard_normal(12)
        v0 = rng.standard_normal(2 * grid4.M)
        g = quadratic_gradient(c, A.matrix, L.matrix, v0, P, 1e-2)
        fd = np.array([
            (quadratic_objective(c + 1e-6 * e, A.matrix, L.matrix, v0, P, 1e-2)
             - quadratic_objective(c - 1e-6 * e, A.matrix, L.matrix, v0, P, 1e-2)) / 2e-6
            for e in np.eye(12)
        ])
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5


def test_minimiser_matches_least_squares_oracle(LA4, grid4, rng):
    L, A = LA4
    N, delta = 4, 1e-3
    P = grid4.pi_real_indices(N)
    v0 = rng.standard_normal(2 * grid4.M)
    c, res = solve_quadratic_min(A, L, v0, N, delta, grid4, return_residual=True)
    assert res <= 1e-10
    # stacked form: 1/2|c|^2 + 1/delta |P(Lv + Ac)|^2 = 1/2 |[I; s PA] c - [0; -s PLv]|^2, s = sqrt(2/delta)
    s = np.sqrt(2 / delta)
    M = np.vstack([np.eye(12), s * A.matrix[P]])
    rhs = np.concatenate([np.zeros(12), -s * (L.matrix @ v0)[P]])
    c_ls = np.linalg.lstsq(M, rhs, rcond=None)[0]
    np.testing.assert_allclose(c, c_ls, rtol=1e-8, atol=1e-10)
    assert np.linalg.norm(quadratic_gradient(c, A.matrix, L.matrix, v0, P, delta)) < 1e-8 * np.linalg.norm(c)


def test_closed_form_phi_matches_columnwise_solves(LA4, grid4):
    L, A = LA4
    phi = closed_form_phi(A.matrix, L.matrix, 4, 1e-2, grid4)
    for i in (0, 7, grid4.M + 3):
        e = np.zeros(2 * grid4.M)
        e[i] = 1.0
        np.testing.assert_allclose(phi[:, i], solve_quadratic_min(A, L, e, 4, 1e-2, grid4), atol=1e-10)


def test_phi_batch_matches_assembled_closed_form(h4, uhat4, basis4, LA4, grid4):
    L, A = LA4
    phi = closed_form_phi(A.matrix[:, :8], L.matrix, 4, 1e-2, grid4)
    pb = phi_batch(h4, uhat4.coeffs[None], basis4, 4, 1e-2, 8, NU, DT)[0]
    np.testing.assert_allclose(pb, phi, atol=1e-10 * np.abs(phi).max())


def test_phi_is_lipschitz_in_state(h4, uhat4, basis4, grid4, rng):
    v = SpectralVelocity.random(grid4, rng)
    v = v * (1 / v.norm())
    base = phi_batch(h4, uhat4.coeffs[None], basis4, 4, 1e-2, 8, NU, DT)[0]
    ratios = []
    for r in (1e-2, 1e-3):
        other = phi_batch(h4, (uhat4 + v * r).coeffs[None], basis4, 4, 1e-2, 8, NU, DT)[0]
        ratios.append(np.linalg.norm(other - base, 2) / r)
    # difference quotient converges, so the local Lipschitz constant is finite
    assert ratios[1] == pytest.approx(ratios[0], rel=0.1)


def test_operator_csv_roundtrip(h4, uhat4, basis4, tmp_path):
    op = build_phi(h4, uhat4, basis4, 4, 1e-2, 8, NU, DT)
    op.seed = 11
    path = op.save(tmp_path / "phi.csv")
    back = ControlOperator.load(path)
    np.testing.assert_array_equal(back.phi, op.phi)
    assert back.metadata() == op.metadata()
    assert op.closed_loop().shape == (2 * uhat4.grid.M, 2 * uhat4.grid.M)
    with pytest.raises(ConfigurationError):
        ControlOperator.from_csv("1,2\n")


def test_delta_must_be_positive(LA4, grid4):
    L, A = LA4
    with pytest.raises(ConfigurationError):
        closed_form_phi(A.matrix, L.matrix, 4, 0.0, grid4)


def test_observability_rank_and_monotone_constant(ref4, basis4):
    reps = [observability_check(ref4, basis4, 4, m) for m in (8, 12, 16)]
    assert all(r.full_rank and r.rank == 8 for r in reps)
    C = [r.C_obs for r in reps]
    assert C[0] >= C[1] >= C[2]
    low = observability_check(ref4, basis4, 4, 3)
    assert not low.full_rank and low.C_obs == np.inf


@pytest.fixture(scope="module")
def loose_sweep(h4, uhat4, basis4):
    # a coarse grid cannot reach q/2 = 0.125; q = 0.95 exercises the same search
    return parameter_sweep(h4, uhat4, basis4, NU, DT, q=0.95, N_grid=(4, 8), m_grid=(8, 16), delta_grid=(1e-2, 1e-4))


def test_sweep_stops_at_first_certified_candidate(loose_sweep):
    res = loose_sweep
    assert res.success
    assert res.norm <= 0.475
    assert all(r["closed_loop_norm"] > 0.475 for r in res.table[:-1])
    assert np.linalg.norm(res.operator.closed_loop(), 2) == pytest.approx(res.norm, rel=1e-12)
    assert res.table_csv().startswith("N,m,delta")


def test_sweep_failure_emits_obstruction_report(h4, uhat4, basis4):
    res = parameter_sweep(h4, uhat4, basis4, NU, DT, N_grid=(2,), m_grid=(1,), delta_grid=(1e-2,))
    assert not res.success and res.operator is None
    assert res.report.startswith("OBSERVABILITY OBSTRUCTION")


def test_contraction_on_small_grid(loose_sweep, h4, uhat4, basis4):
    op = loose_sweep.operator
    d = calibrate_d(op, h4, uhat4, basis4, NU, DT, rng=np.random.default_rng(0))
    rep = verify_contraction(op, h4, uhat4, basis4, NU, DT, d=d, n_pairs=40, rng=np.random.default_rng(1))
    assert rep.success_rate >= 0.95 and rep.passed
    assert abs(rep.remainder_slope - 2.0) <= 0.2


def test_feedback_controller_estimator(h4, uhat4, basis4, grid4, rng):
    est = FeedbackController(basis=basis4, h=h4, N=4, delta=1e-2, m=8, dt=DT)
    assert clone(est).get_params()["m"] == 8
    X = rng.standard_normal((5, 2 * grid4.M))
    with pytest.raises(NotFittedError):
        est.transform(X)
    est.fit(uhat4.to_real()[None])
    C = est.transform(X)
    assert C.shape == (5, 8)
    np.testing.assert_allclose(C, X @ est.operator_.phi.T)
    np.testing.assert_allclose(est.predict(X), X @ est.operator_.closed_loop().T)
    assert -est.score(X) <= est.contraction_ + 1e-12
    with pytest.raises(GridMismatchError):
        est.transform(X[:, :-1])
    with pytest.raises(ConfigurationError):
        FeedbackController(basis=basis4, delta=-1.0).fit(uhat4.to_real()[None])
