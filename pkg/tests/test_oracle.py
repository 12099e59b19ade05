import numpy as np
import pytest
from scipy.optimize import minimize

from feedbackopt.lti import StateSpace, steady_state_maps
from feedbackopt.oracle import (FrozenProblem, NonConvergenceError, augmented_lagrangian,
                                solve_frozen, stationary_state)
from feedbackopt.prox import BoxIndicator, Quadratic, SoftBoxPenalty, ZeroSetIndicator


def plant(rng, n=3, m=3, p1=1, p2=2, q=2):
    A = -np.eye(n) + 0.3 * rng.normal(size=(n, n))
    A -= max(0.0, np.linalg.eigvals(A).real.max() + 0.5) * np.eye(n)
    return StateSpace.build(A, rng.normal(size=(n, m)), rng.normal(size=(n, q)),
                            rng.normal(size=(p1, n)), rng.normal(size=(p2, n)))


def cost(m, rng):
    G = rng.normal(size=(m, m))
    return Quadratic(G @ G.T / m + 0.5 * np.eye(m), rng.normal(size=m))


def test_equality_constrained_qp_matches_kkt():
    rng = np.random.default_rng(0)
    s = plant(rng, p1=0)
    mp = steady_state_maps(s)
    f, w = cost(3, rng), rng.normal(size=2)
    sol = solve_frozen(FrozenProblem(f, None, ZeroSetIndicator(2), mp, w, 2.0))
    # KKT: H u + c + Pi2u' nu = 0, Pi2u u + Pi2w w = 0
    K = np.block([[f.H, mp.Pi2u.T], [mp.Pi2u, np.zeros((2, 2))]])
    ref = np.linalg.solve(K, np.concatenate([-f.c, -mp.Pi2w @ w]))
    np.testing.assert_allclose(sol.u, ref[:3], atol=1e-8)
    np.testing.assert_allclose(sol.lam, ref[3:], atol=1e-8)
    assert sol.residual <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_box_and_soft_penalty_match_scipy(seed):
    rng = np.random.default_rng(seed)
    s = plant(rng)
    mp = steady_state_maps(s)
    f, w = cost(3, rng), rng.normal(size=2)
    h = SoftBoxPenalty(1.3, [-0.1], [0.1])
    g = BoxIndicator([-0.2, -0.2], [0.2, 0.2])
    sol = solve_frozen(FrozenProblem(f, h, g, mp, w, 1.5))

    def obj(u):
        return f.value(u) + h.value(mp.Pi1u @ u + mp.Pi1w @ w)

    y2 = lambda u: mp.Pi2u @ u + mp.Pi2w @ w
    cons = [{"type": "ineq", "fun": lambda u: 0.2 - y2(u)},
            {"type": "ineq", "fun": lambda u: y2(u) + 0.2}]
    ref = minimize(obj, np.zeros(3), constraints=cons, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 500})
    assert ref.success
    np.testing.assert_allclose(sol.u, ref.x, atol=1e-5)
    assert np.all(np.abs(y2(sol.u)) <= 0.2 + 1e-8)


def test_saddle_point_inequalities():
    rng = np.random.default_rng(11)
    s = plant(rng, p1=0)
    mp = steady_state_maps(s)
    prob = FrozenProblem(cost(3, rng), None, BoxIndicator([-0.1, -0.1], [0.1, 0.1]), mp,
                         rng.normal(size=2), 1.0)
    sol = solve_frozen(prob)
    L0 = augmented_lagrangian(prob, sol.u, sol.lam)
    for _ in range(50):
        du, dl = 0.1 * rng.normal(size=3), 0.1 * rng.normal(size=2)
        assert augmented_lagrangian(prob, sol.u + du, sol.lam) >= L0 - 1e-10
        assert augmented_lagrangian(prob, sol.u, sol.lam + dl) <= L0 + 1e-10


def test_regularized_problem_and_warm_start():
    rng = np.random.default_rng(3)
    s = plant(rng, p1=0)
    mp = steady_state_maps(s)
    GQ = np.diag([0.1, 0.0])
    prob = FrozenProblem(cost(3, rng), None, BoxIndicator([-0.1, -0.1], [0.1, 0.1]), mp,
                         rng.normal(size=2), 1.0, GQ)
    cold = solve_frozen(prob)
    du, dl = prob.field(cold.u, cold.lam)
    assert np.linalg.norm(np.r_[du, dl]) <= 1e-9
    warm = solve_frozen(prob, u0=cold.u, lam0=cold.lam)
    assert warm.iterations == 0


def test_nonconvergence_raises():
    rng = np.random.default_rng(5)
    s = plant(rng, p1=0)
    prob = FrozenProblem(cost(3, rng), None, ZeroSetIndicator(2), steady_state_maps(s),
                         np.ones(2), 1.0)
    with pytest.raises(NonConvergenceError) as exc:
        solve_frozen(prob, tol=1e-30, max_iter=3)
    assert len(exc.value.history) >= 1


def test_stationary_state():
    s = StateSpace.build([[-2.0]], [[1.0]], [[4.0]])
    np.testing.assert_allclose(stationary_state(s, [2.0], [1.0]), [3.0])
