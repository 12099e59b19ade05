import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedbackopt.prox import (BoxIndicator, CapabilityError, Composite, DeltaMap, Event, Quadratic,
                              ScheduleError, SoftBoxPenalty, ZeroSetIndicator, delta_eval,
                              moreau_envelope_value, moreau_grad, prox, soft_threshold,
                              spec_from_dict)

finite = st.floats(-5, 5, allow_nan=False)


def batch_value(spec, X):
    """Objective values for the rows of ``X``, written independently of the library."""
    if spec.kind == "quadratic":
        return 0.5 * np.einsum("ij,jk,ik->i", X, spec.H, X) + X @ spec.c
    if spec.kind == "box":
        inside = np.all((X >= spec.lo) & (X <= spec.hi), axis=1)
        return np.where(inside, 0.0, np.inf)
    if spec.kind == "zero":
        return np.where(np.all(X == 0.0, axis=1), 0.0, np.inf)
    if spec.kind == "composite":
        out, k = np.zeros(len(X)), 0
        for p in spec.parts:
            out += batch_value(p, X[:, k:k + p.dim])
            k += p.dim
        return out
    raise ValueError(spec.kind)


def special_points(spec):
    """Coordinates where a nonsmooth minimizer may sit (bounds and zero)."""
    if spec.kind == "composite":
        return [c for p in spec.parts for c in special_points(p)]
    if spec.kind == "box":
        return [[b for b in (lo, hi) if np.isfinite(b)] for lo, hi in zip(spec.lo, spec.hi)]
    if spec.kind == "zero":
        return [[0.0]] * spec.dim
    return [[]] * spec.dim


def grid_prox(spec, v, mu, half=3.0, n=201, levels=4):
    """Brute-force prox by coarse-to-fine grid minimization (dims 1 and 2 only)."""
    v = np.asarray(v, dtype=float)
    extra = special_points(spec)
    center = v.copy()
    for _ in range(levels):
        axes = [np.r_[np.linspace(c - half, c + half, n), e] for c, e in zip(center, extra)]
        X = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(v), -1).T
        vals = batch_value(spec, X) + ((X - v) ** 2).sum(1) / (2 * mu)
        center = X[np.argmin(vals)]
        half = 4 * half / (n - 1)
    return center, half


def specs_2d():
    return [
        Quadratic(np.array([[2.0, 0.5], [0.5, 1.0]]), np.array([0.3, -0.2])),
        BoxIndicator([-1.0, -np.inf], [0.5, 0.2]),
        SoftBoxPenalty(3.0, [-0.5, -0.5], [0.5, 1.0]),
        Composite((BoxIndicator([0.0], [1.0]), ZeroSetIndicator(1))),
    ]


def test_soft_threshold_cases():
    lo, hi = np.array([-1.0, -1.0, -1.0, -np.inf]), np.array([1.0, 1.0, 1.0, 2.0])
    v = np.array([-3.0, 0.2, 4.0, -100.0])
    np.testing.assert_array_equal(soft_threshold(lo, hi, v), [-2.0, 0.0, 3.0, 0.0])
    with pytest.raises(ValueError):
        soft_threshold(lo[:2], hi, v)


@pytest.mark.parametrize("spec", specs_2d(), ids=lambda s: s.kind)
@pytest.mark.parametrize("mu", [0.3, 1.0, 2.5])
def test_prox_matches_grid_search(spec, mu):
    rng = np.random.default_rng(7)
    for _ in range(5):
        v = rng.uniform(-2, 2, 2)
        if spec.kind == "softbox":
            # no closed-form prox; the value is still checked through its gradient below
            continue
        if spec.kind == "composite":
            v[1] = rng.uniform(-0.5, 0.5)
        p = prox(spec, v, mu)
        g, res = grid_prox(spec, v, mu)
        assert np.max(np.abs(p - g)) <= res


def test_prox_1d_grid_search():
    rng = np.random.default_rng(8)
    for spec in (Quadratic([[0.7]], [1.0]), BoxIndicator([-0.4], [0.9]), ZeroSetIndicator(1)):
        for _ in range(20):
            v, mu = rng.uniform(-3, 3, 1), rng.uniform(0.1, 3)
            g, res = grid_prox(spec, v, mu)
            assert abs(prox(spec, v, mu)[0] - g[0]) <= res


def test_softbox_has_no_prox():
    with pytest.raises(CapabilityError):
        prox(SoftBoxPenalty(1.0, [0.0], [1.0]), [2.0], 1.0)
    with pytest.raises(CapabilityError):
        BoxIndicator([0.0], [1.0]).grad([0.5])
    with pytest.raises(ValueError):
        prox(BoxIndicator([0.0], [1.0]), [0.5], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), st.floats(0.05, 5))
def test_prox_nonexpansive_and_moreau_lipschitz(xs, mu):
    v1, v2 = np.array(xs[:2]), np.array(xs[2:])
    for spec in specs_2d():
        if spec.kind == "softbox":
            continue
        d = np.linalg.norm(v1 - v2)
        assert np.linalg.norm(prox(spec, v1, mu) - prox(spec, v2, mu)) <= d + 1e-10
        assert np.linalg.norm(moreau_grad(spec, v1, mu) - moreau_grad(spec, v2, mu)) <= d / mu + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2), st.floats(0.1, 3))
def test_moreau_gradient_finite_difference(xs, mu):
    v = np.array(xs)
    h = 1e-6
    for spec in specs_2d():
        if spec.kind == "softbox":
            continue
        fd = np.array([(moreau_envelope_value(spec, v + h * e, mu) -
                        moreau_envelope_value(spec, v - h * e, mu)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(moreau_grad(spec, v, mu), fd, atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2))
def test_softbox_gradient_and_lipschitz(xs):
    spec = SoftBoxPenalty(2.5, [-0.5, -0.5], [0.5, 1.0])
    x = np.array(xs)
    h = 1e-6
    fd = np.array([(spec.value(x + h * e) - spec.value(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(spec.grad(x), fd, atol=1e-5)
    y = x + 0.37
    assert np.linalg.norm(spec.grad(x) - spec.grad(y)) <= spec.lipschitz() * np.linalg.norm(x - y) + 1e-12


def test_prox_jacobian_matches_finite_difference():
    rng = np.random.default_rng(4)
    for spec in specs_2d():
        if spec.kind == "softbox":
            continue
        for _ in range(10):
            v, mu = rng.uniform(-2, 2, 2), 0.8
            J = spec.prox_jacobian(v, mu)
            fd = np.column_stack([(spec.prox(v + 1e-7 * e, mu) - spec.prox(v - 1e-7 * e, mu)) / 2e-7
                                  for e in np.eye(2)])
            np.testing.assert_allclose(J, fd, atol=1e-6)


def test_constants():
    q = Quadratic(np.diag([1.0, 3.0]), np.zeros(2))
    assert q.strong_convexity() == pytest.approx(1.0)
    assert q.lipschitz() == pytest.approx(3.0)
    assert q.separable
    assert not Quadratic(np.array([[2.0, 1.0], [1.0, 2.0]]), np.zeros(2)).separable
    with pytest.raises(ValueError):
        Quadratic(-np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        BoxIndicator([1.0], [0.0])


@pytest.mark.parametrize("spec", specs_2d() + [ZeroSetIndicator(3)], ids=lambda s: s.kind)
def test_json_roundtrip(spec):
    back = spec_from_dict(__import__("json").loads(spec.to_json()))
    assert back.to_dict() == spec.to_dict()


def test_delta_map_schedule():
    f = Quadratic(np.eye(1), [0.0])
    g0, g1 = BoxIndicator([-1.0], [1.0]), BoxIndicator([-0.5], [0.5])
    d = DeltaMap(f, None, g0, 1.0, (Event(20.0, g=g0), Event(10.0, g=g1)))
    assert [e.t for e in d.schedule] == [10.0, 20.0]
    assert d.specs_at(9.999)[2] is g0
    assert d.specs_at(10.0)[2] is g1  # right-continuous
    assert d.specs_at(20.0)[2] is g0
    with pytest.raises(ScheduleError):
        d.specs_at(-1.0)
    with pytest.raises(ScheduleError):
        DeltaMap(f, None, g0, 1.0, (Event(-1.0, g=g1),))
    with pytest.raises(ValueError):
        DeltaMap(f, None, g0, 1.0, (Event(1.0, g=BoxIndicator([0, 0], [1, 1])),))
    with pytest.raises(CapabilityError):
        DeltaMap(g0, None, g0, 1.0)
    back = DeltaMap.from_dict(d.to_dict())
    assert back.to_dict() == d.to_dict()


def test_delta_eval_components():
    f = Quadratic(np.diag([2.0, 3.0]), [1.0, 0.0])
    h = SoftBoxPenalty(4.0, [-1.0], [1.0])
    g = BoxIndicator([-0.2], [0.2])
    d = DeltaMap(f, h, g, 0.5)
    y = np.array([1.0, -1.0, 3.0, 0.7])
    out = delta_eval(d, y, 0.0)
    m = 2.0
    np.testing.assert_allclose(out[:2], f.grad(y[:2]) - m * y[:2])
    np.testing.assert_allclose(out[2], 4.0 * 2.0)
    np.testing.assert_allclose(out[3], 0.7 - 0.2)  # mu * grad M = v - clip(v)
    assert d.m_strong() == 2.0 and d.lf_hat() == 1.0 and d.lh() == 4.0
