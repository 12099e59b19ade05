import logging

import numpy as np
import pytest

from feedbackopt.lti import StateSpace
from feedbackopt.oracle import frozen_problem, solve_frozen, stationary_state
from feedbackopt.prox import BoxIndicator, DeltaMap, Event, Quadratic, SoftBoxPenalty, ZeroSetIndicator
from feedbackopt.saddleflow import (ClosedLoop, ControllerState, Disturbance, DivergenceError,
                                    Scenario, Segment, default_dt, integrate, integrate_open_loop,
                                    rhs, stationarity_residual)


def scalar_loop(g=None, gammaQ=None, epsilon=1.0, mu=1.0):
    sys = StateSpace.build([[-1.0]], [[1.0]], [[1.0]], C2=[[1.0]])
    d = DeltaMap(Quadratic([[1.0]], [0.0]), None, g or ZeroSetIndicator(1), mu)
    return ClosedLoop(sys, d, gammaQ, epsilon)


def test_rhs_trivial_cases():
    loop = scalar_loop()
    # at the origin with w = 0 everything is at rest
    np.testing.assert_array_equal(rhs(loop, np.zeros(3), 0.0, [0.0]), np.zeros(3))
    # u alone: x' = u, u' = -u - (prox residual of y2 + mu lam = 0) = -u
    np.testing.assert_allclose(rhs(loop, [0.0, 2.0, 0.0], 0.0, [0.0]), [2.0, -2.0, 0.0])
    # with the zero-set indicator grad M_g(v) = v / mu, so lam' = mu (y2/mu + lam - lam) = y2
    np.testing.assert_allclose(rhs(loop, [1.0, 0.0, 0.5], 0.0, [0.0]), [-1.0, -1.5, 1.0])
    fast = loop.with_epsilon(0.1)
    np.testing.assert_allclose(rhs(fast, [1.0, 0.0, 0.0], 0.0, [0.5])[0], -5.0)


def test_state_validation():
    loop = scalar_loop()
    with pytest.raises(ValueError):
        rhs(loop, np.zeros(2), 0.0, [0.0])
    with pytest.raises(FloatingPointError):
        rhs(loop, [np.nan, 0, 0], 0.0, [0.0])
    cs = ControllerState(np.zeros(1), np.ones(1), np.zeros(1))
    assert rhs(loop, cs, 0.0, [0.0]).shape == (3,)
    with pytest.raises(ValueError):
        ClosedLoop(loop.sys, DeltaMap(Quadratic(np.eye(2), np.zeros(2)), None, ZeroSetIndicator(1), 1.0))
    with pytest.raises(ValueError):
        scalar_loop(epsilon=0.0)


def test_rank_warning():
    sys = StateSpace.build(-np.eye(2), np.array([[1.0], [0.0]]), np.zeros((2, 1)), C2=np.eye(2))
    d = DeltaMap(Quadratic([[1.0]], [0.0]), None, BoxIndicator([-1, -1], [1, 1]), 1.0)
    with pytest.warns(RuntimeWarning):
        ClosedLoop(sys, d, np.zeros((2, 2)))
    loop = ClosedLoop(sys, d, np.diag([0.0, 0.2]))
    assert loop.regularization_ok()


def test_zero_trajectory_and_csv(tmp_path):
    loop = scalar_loop()
    sc = Scenario(1.0, 0.1, Disturbance.constant([0.0]), np.zeros(3))
    lg = integrate(loop, sc, with_oracle=True)
    assert lg.z.shape == (11, 3) and np.all(lg.z == 0)
    np.testing.assert_allclose(lg.err, 0.0, atol=1e-12)
    text = lg.to_csv(tmp_path / "out.csv")
    lines = text.splitlines()
    assert lines[0] == "t,x_1,u_1,lambda_1,y2_1,err,zstar_1,zstar_2,zstar_3"
    assert len(lines) == 12
    assert (tmp_path / "out.csv").read_text() == text
    assert Scenario(0.3, 0.1, Disturbance.constant([0.0]), np.zeros(3)).n_samples == 4


def test_converges_to_oracle():
    loop = scalar_loop(BoxIndicator([-0.2], [0.2]))
    w = np.array([0.5])
    sc = Scenario(40.0, 0.01, Disturbance.constant(w), [1.0, -1.0, 0.5])
    lg = integrate(loop, sc, with_oracle=True)
    sol = solve_frozen(frozen_problem(loop, 0.0, w))
    zs = np.r_[stationary_state(loop.sys, sol.u, w), sol.u, sol.lam]
    np.testing.assert_allclose(lg.z[-1], zs, atol=1e-6)
    assert lg.err[-1] < 1e-6 and lg.err[0] > 0.5
    assert stationarity_residual(loop, zs, 0.0, w) < 1e-9


def test_regularized_stationary_point():
    loop = scalar_loop(BoxIndicator([-0.2], [0.2]), gammaQ=[[0.3]])
    w = np.array([1.0])
    lg = integrate(loop, Scenario(60.0, 0.02, Disturbance.constant(w), np.zeros(3)))
    zT = lg.z[-1]
    assert stationarity_residual(loop, zT, 0.0, w) < 1e-9
    # regularized multiplier condition mu (grad M_g - lambda) = gammaQ lambda
    y2, lam = lg.y2[-1], lg.lam[-1]
    v = y2 + loop.mu * lam
    gm = (v - np.clip(v, -0.2, 0.2)) / loop.mu
    np.testing.assert_allclose(loop.mu * (gm - lam), 0.3 * lam, atol=1e-9)
    # so the shifted output y2 - gammaQ lambda is the projection, hence inside the box
    assert abs(lam[0]) > 0.1
    np.testing.assert_allclose(y2 - 0.3 * lam, np.clip(v, -0.2, 0.2), atol=1e-9)
    assert np.all(np.abs(y2 - 0.3 * lam) <= 0.2 + 1e-8)


def test_event_snapping_and_schedule(caplog):
    loop = scalar_loop(BoxIndicator([-1.0], [1.0]))
    ev = (Event(1.003, g=BoxIndicator([-0.1], [0.1])),)
    w = Disturbance.constant([2.0])
    with caplog.at_level(logging.WARNING, logger="feedbackopt.saddleflow"):
        lg = integrate(loop, Scenario(30.0, 0.01, w, np.zeros(3), events=ev), with_oracle=True,
                       oracle_stride=50)
    assert any("snapped" in r.message for r in caplog.records)
    assert 100 in lg.oracle_index and 99 in lg.oracle_index
    assert abs(lg.y2[-1, 0] - 0.1) < 1e-4


def test_segments_switch():
    d = Disturbance((Segment(0.0, [1.0]), Segment(2.0, [0.0], [1.0], omega=1.0)))
    np.testing.assert_allclose(d(1.0), [1.0])
    np.testing.assert_allclose(d(2.0), [np.cos(2.0)])
    assert d.index(1.99) == 0 and d.index(2.0) == 1
    with pytest.raises(ValueError):
        Disturbance((Segment(1.0, [0.0]),))


def test_divergence():
    sys = StateSpace.build([[-1.0]], [[1.0]], [[1.0]], C2=[[1.0]])
    d = DeltaMap(Quadratic([[1.0]], [0.0]), None, ZeroSetIndicator(1), 1.0)
    loop = ClosedLoop(sys, d)
    with pytest.raises(DivergenceError) as exc:
        integrate(loop, Scenario(200.0, 5.0, Disturbance.constant([1.0]), np.zeros(3)))
    assert exc.value.log is not None


def test_open_loop_and_default_dt():
    loop = scalar_loop()
    sc = Scenario(10.0, 0.01, Disturbance.constant([1.0]), [0.0, 0.0, 0.0])
    lg = integrate_open_loop(loop.sys, [0.5], sc)
    np.testing.assert_allclose(lg.x[-1], 1.5 * (1 - np.exp(-10.0)), rtol=1e-8)
    assert lg.lam.shape == (1001, 0)
    assert "lambda_1" not in lg.header()
    assert default_dt(loop) in (0.05, 0.02, 0.01, 0.5e-2)
    assert default_dt(loop.with_epsilon(1e-3)) <= 1.5e-3


def test_soft_penalty_loop_runs():
    sys = StateSpace.build(-np.eye(2), np.eye(2), np.eye(2), C1=[[1.0, 0.0]], C2=[[0.0, 1.0]])
    d = DeltaMap(Quadratic(np.eye(2), [0.1, 0.0]), SoftBoxPenalty(2.0, [-0.1], [0.1]),
                 ZeroSetIndicator(1), 2.0)
    loop = ClosedLoop(sys, d, epsilon=0.5)
    w = np.array([0.3, 0.2])
    lg = integrate(loop, Scenario(30.0, 0.01, Disturbance.constant(w), np.zeros(5)), with_oracle=True)
    assert lg.err[-1] < 1e-6
