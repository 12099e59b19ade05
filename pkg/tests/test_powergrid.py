import numpy as np
import pytest

from feedbackopt.powergrid import GridModel, build_dcopf, build_swing, ieee9_case, load_case, reduce
from feedbackopt.prox import delta_eval


def two_bus():
    return GridModel(lines=((0, 1, 2.0),), M=[1.0, 0.5], D=[0.2, 0.1], gen_buses=(0,),
                     load_buses=(1,), p_min=[-1.0], p_max=[1.0], name="two-bus")


def test_two_bus_matrices():
    g = two_bus()
    np.testing.assert_array_equal(g.Y, [[2.0, -2.0], [-2.0, 2.0]])
    np.testing.assert_array_equal(g.E, [[2.0, -2.0]])
    sw = build_swing(g)
    assert sw.A.shape == (4, 4)
    np.testing.assert_allclose(sw.A[2:, :2], [[-2.0, 2.0], [4.0, -4.0]])
    np.testing.assert_allclose(sw.Bu[2:, 0], [1.0, 0.0])
    np.testing.assert_allclose(sw.Bw[2:, 0], [0.0, 2.0])
    red = reduce(sw)
    assert red.A.shape == (3, 3)
    # the angle difference direction is all that is left
    np.testing.assert_allclose(np.abs(red.U[:, 0]), [2 ** -0.5] * 2)


def test_ieee9_structure():
    case = ieee9_case()
    g = case.grid
    assert (g.n_bus, g.n_line) == (9, 9)
    Y, E = g.Y, g.E
    np.testing.assert_allclose(Y @ np.ones(9), 0.0, atol=1e-12)
    np.testing.assert_allclose(E @ np.ones(9), 0.0, atol=1e-12)
    assert np.linalg.matrix_rank(Y) == 8
    U = case.reduced.U
    np.testing.assert_allclose(U.T @ U, np.eye(8), atol=1e-12)
    np.testing.assert_allclose(U.T @ np.ones(9), 0.0, atol=1e-12)
    assert case.reduced.A.shape == (17, 17)
    assert np.linalg.eigvals(case.reduced.A).real.max() < 0


def test_reduced_outputs_match_unreduced():
    case = ieee9_case()
    sw = build_swing(case.grid)
    red = case.reduced
    rng = np.random.default_rng(0)
    for _ in range(5):
        xr = rng.normal(size=17)
        x = red.T @ xr
        np.testing.assert_allclose(sw.C @ x, red.C @ xr, atol=1e-12)
        np.testing.assert_allclose(red.T.T @ sw.A @ x, red.A @ xr, atol=1e-12)
    # a common angle shift changes nothing observable
    shift = np.r_[np.ones(9), np.zeros(9)]
    np.testing.assert_allclose(sw.C @ shift, 0.0, atol=1e-12)


def test_disconnected_and_bad_data():
    g = GridModel(lines=((0, 1, 1.0),), M=[1.0, 1.0, 1.0], D=[1.0, 1.0, 1.0], gen_buses=(0,),
                  load_buses=(2,))
    with pytest.raises(ValueError, match="disconnected"):
        build_swing(g)
    with pytest.raises(ValueError):
        GridModel(lines=((0, 0, 1.0),), M=[1.0], D=[1.0], gen_buses=(0,), load_buses=())
    with pytest.raises(ValueError):
        GridModel(lines=((0, 1, 1.0),), M=[1.0, -1.0], D=[1.0, 1.0], gen_buses=(0,), load_buses=())


def test_load_case_from_dict_and_file(tmp_path):
    doc = {"buses": [{"id": 1, "m": 1.0, "d": 0.1}, {"id": 2, "m": 1.0, "d": 0.1}],
           "lines": [{"from": 1, "to": 2, "x": 0.5, "p_max": 1.0, "p_min": -1.0}],
           "gens": [1], "loads": [2]}
    g, _ = load_case(doc)
    assert g.lines == ((0, 1, 2.0),) and g.p_max[0] == 1.0
    p = tmp_path / "c.json"
    p.write_text(__import__("json").dumps(doc))
    assert load_case(str(p))[0].lines == g.lines


def test_controller_modes_match_displayed_equations():
    case = ieee9_case()
    g, red = case.grid, case.reduced
    nl = g.n_line
    rng = np.random.default_rng(1)
    u, flows, freq = rng.normal(size=3), rng.uniform(-2, 2, nl), rng.normal()
    plant, d, gq = build_dcopf(g, red, "soft", mu=4.0, eta=4.0, limit_events=case.limit_events)
    assert gq is None and (plant.p1, plant.p2) == (nl, 1)
    lam = 0.3
    y = np.r_[u, flows, freq + 4.0 * lam]
    out = delta_eval(d, y, 0.0)
    m = d.m_strong()
    np.testing.assert_allclose(out[:3], u + 1.0 - m * u)
    viol = flows - np.clip(flows, -1.5, 1.5)
    np.testing.assert_allclose(out[3:3 + nl], 4.0 * viol)
    np.testing.assert_allclose(out[-1], freq + 4.0 * lam)  # zero set: mu grad M = v
    # limit drop on line 1 in [10, 20)
    np.testing.assert_allclose(delta_eval(d, y, 15.0)[3], 4.0 * (flows[0] - np.clip(flows[0], -0.5, 0.5)))

    plant, d, gq = build_dcopf(g, red, "approximate", mu=4.0, gamma=0.01)
    assert (plant.p1, plant.p2) == (0, nl + 1)
    np.testing.assert_allclose(np.diag(gq), np.r_[np.full(nl, 0.01), 0.0])
    v = np.r_[flows, freq]
    out = delta_eval(d, np.r_[u, v], 0.0)
    np.testing.assert_allclose(out[3:3 + nl], flows - np.clip(flows, -1.5, 1.5))
    np.testing.assert_allclose(out[-1], freq)
    with pytest.raises(ValueError):
        build_dcopf(g, red, "soft", gamma=0.1)
    with pytest.raises(ValueError):
        build_dcopf(g, red, "none")


def test_rank_facts_for_regularization():
    case = ieee9_case()
    loop = case.loop("approximate", gamma=0.01)
    P = loop.maps.Pi2u @ loop.maps.Pi2u.T
    assert np.linalg.matrix_rank(P) == 3 < P.shape[0]
    assert loop.regularization_ok()
    with pytest.warns(RuntimeWarning):
        case.loop("approximate", gamma=0.0)


def test_equilibrium_is_dcopf_optimum():
    case = ieee9_case()
    loop = case.loop("approximate", gamma=1e-2)
    z = case.equilibrium(loop, 0.0)
    flows, freq = case.flows_and_frequency(z[:17])
    assert abs(freq[0]) < 1e-8
    assert np.all(np.abs(flows) <= 1.5 + 1e-6)
    # zero frequency forces generation to balance the load
    np.testing.assert_allclose(z[17:20].sum(), -case.disturbance(0.0).sum(), atol=1e-8)
