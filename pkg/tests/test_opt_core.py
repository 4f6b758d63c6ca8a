import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dadr_mpc import opt_core
from dadr_mpc.errors import InvalidInputError
from dadr_mpc.opt_core import (INFEASIBLE, OPTIMAL, UNBOUNDED, QpProblem, check_kkt,
                               dump_problem, load_problem, solve_lp, solve_qp)

LP_BACKENDS = ("highs", "ipm", "clarabel")
QP_BACKENDS = ("clarabel", "ipm")


@pytest.mark.parametrize("backend", LP_BACKENDS)
def test_lp_max_x_below_two(backend):
    sol = solve_lp(QpProblem(1, fq=[-1.0], A_ineq=[[1.0]], b_ineq=[2.0]), backend=backend)
    assert sol.status == OPTIMAL
    assert sol.z[0] == pytest.approx(2.0, abs=1e-7)
    assert sol.kkt.max() <= opt_core.LP_TOL


@pytest.mark.parametrize("backend", LP_BACKENDS)
def test_lp_infeasible(backend):
    sol = solve_lp(QpProblem(1, A_ineq=[[1.0], [-1.0]], b_ineq=[0.0, -1.0]), backend=backend)
    assert sol.status == INFEASIBLE


@pytest.mark.parametrize("backend", LP_BACKENDS)
def test_lp_unbounded(backend):
    sol = solve_lp(QpProblem(1, fq=[-1.0], A_ineq=[[-1.0]], b_ineq=[0.0]), backend=backend)
    assert sol.status == UNBOUNDED


def test_lp_triangle_support():
    sol = solve_lp(QpProblem(2, fq=[-1.0, -1.0], A_ineq=[[-1, 0], [0, -1], [1, 1]],
                             b_ineq=[0, 0, 2]))
    assert -sol.objective == pytest.approx(2.0)


def test_solve_lp_rejects_quadratic():
    with pytest.raises(InvalidInputError):
        solve_lp(QpProblem(1, Hq=[[1.0]]))


@pytest.mark.parametrize("backend", QP_BACKENDS)
def test_qp_active_constraint(backend):
    # (z - 1)^2 = z^2 - 2 z + 1
    sol = solve_qp(QpProblem(1, Hq=[[2.0]], fq=[-2.0], A_ineq=[[1.0]], b_ineq=[0.0]),
                   backend=backend)
    assert sol.status == OPTIMAL
    assert sol.z[0] == pytest.approx(0.0, abs=1e-7)
    assert sol.objective + 1.0 == pytest.approx(1.0, abs=1e-7)


@pytest.mark.parametrize("backend", QP_BACKENDS)
def test_qp_symmetric_equality(backend):
    sol = solve_qp(QpProblem(2, Hq=2 * np.eye(2), A_eq=[[1.0, 1.0]], b_eq=[1.0]), backend=backend)
    assert np.allclose(sol.z, [0.5, 0.5], atol=1e-7)


def _dual_projected_gradient(H, f, A, b, iters=200000, tol=1e-13):
    """Reference solver: projected gradient ascent on the dual of a strictly convex QP."""
    Hinv = np.linalg.inv(H)
    M = A @ Hinv @ A.T
    step = 1.0 / np.linalg.eigvalsh(M).max()
    y = np.zeros(A.shape[0])
    for _ in range(iters):
        grad = -(A @ Hinv @ (f + A.T @ y)) - b
        y_new = np.maximum(y + step * grad, 0.0)
        if np.max(np.abs(y_new - y)) < tol:
            y = y_new
            break
        y = y_new
    z = -Hinv @ (f + A.T @ y)
    return z, 0.5 * z @ H @ z + f @ z


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("backend", QP_BACKENDS)
def test_random_qp_matches_first_order_reference(seed, backend):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(10, 10))
    H = L @ L.T / 10 + 0.5 * np.eye(10)
    f = rng.normal(size=10)
    A = rng.normal(size=(20, 10))
    b = rng.uniform(0.1, 1.0, 20)        # z = 0 strictly feasible
    _, ref = _dual_projected_gradient(H, f, A, b)
    sol = solve_qp(QpProblem(10, Hq=H, fq=f, A_ineq=A, b_ineq=b), backend=backend)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(ref, abs=1e-5)
    assert sol.kkt.max() <= opt_core.QP_TOL


def test_kkt_of_trivial_optimum():
    prob = QpProblem(1, Hq=[[2.0]], fq=[-2.0], A_ineq=[[1.0]], b_ineq=[0.0])
    rep = check_kkt(prob, np.array([0.0]))
    assert rep.max() <= 1e-9


def test_kkt_detects_perturbation():
    prob = QpProblem(1, Hq=[[2.0]], fq=[-2.0], A_ineq=[[1.0]], b_ineq=[0.0])
    rep = check_kkt(prob, np.array([0.1]))
    assert rep.primal_abs >= 0.09


def test_kkt_complementarity_at_lp_vertex():
    prob = QpProblem(2, fq=[-1.0, -1.0], A_ineq=[[-1, 0], [0, -1], [1, 1], [1, 0]],
                     b_ineq=[0, 0, 2, 1.5])
    sol = solve_lp(prob)
    rep = check_kkt(prob, sol.z, sol.y_ineq, sol.y_eq, sol.y_lb, sol.y_ub)
    assert rep.complementarity <= 1e-9


def _random_problem(rng, n=8, m=12, me=2):
    L = rng.normal(size=(n, n))
    return QpProblem(n, Hq=L @ L.T, fq=rng.normal(size=n), A_ineq=rng.normal(size=(m, n)),
                     b_ineq=rng.uniform(0.5, 1.0, m), A_eq=rng.normal(size=(me, n)) * 0.1,
                     b_eq=np.zeros(me), lb=-5 * np.ones(n), ub=5 * np.ones(n))


def test_determinism_bitwise():
    rng = np.random.default_rng(11)
    prob = _random_problem(rng)
    a, b = solve_qp(prob), solve_qp(prob)
    assert a.z.tobytes() == b.z.tobytes() and a.objective == b.objective


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(0.01, 100.0))
def test_scaling_leaves_argmin_unchanged(seed, gamma):
    rng = np.random.default_rng(seed)
    prob = _random_problem(rng)
    base = solve_qp(prob)
    scaled = solve_qp(QpProblem(prob.n_vars, Hq=gamma * prob.Hq, fq=gamma * prob.fq,
                                A_ineq=prob.A_ineq, b_ineq=prob.b_ineq, A_eq=prob.A_eq,
                                b_eq=prob.b_eq, lb=prob.lb, ub=prob.ub))
    assert base.ok and scaled.ok
    assert np.allclose(base.z, scaled.z, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    prob = _random_problem(rng)
    a = solve_qp(prob, backend="clarabel")
    b = solve_qp(prob, backend="ipm")
    assert a.ok and b.ok
    assert a.objective == pytest.approx(b.objective, abs=1e-6 * max(1.0, abs(a.objective)))


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    prob = _random_problem(rng)
    path = tmp_path / "qp.txt"
    dump_problem(prob, path)
    back = load_problem(path)
    for name in ("Hq", "A_ineq", "A_eq"):
        assert abs(getattr(prob, name) - getattr(back, name)).max() == 0.0
    for name in ("fq", "b_ineq", "b_eq", "lb", "ub"):
        assert np.array_equal(getattr(prob, name), getattr(back, name))
    assert solve_qp(back).objective == solve_qp(prob).objective


def test_problem_validation():
    with pytest.raises(InvalidInputError):
        QpProblem(2, Hq=[[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        QpProblem(1, lb=[np.nan])


def test_sparse_inputs_accepted():
    prob = QpProblem(2, Hq=sp.identity(2), fq=[1.0, 1.0], A_ineq=sp.csr_matrix([[-1.0, 0.0]]),
                     b_ineq=[0.0])
    sol = solve_qp(prob)
    assert np.allclose(sol.z, [0.0, -1.0], atol=1e-7)
