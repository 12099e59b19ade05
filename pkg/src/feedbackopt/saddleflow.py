"""Online saddle-flow controller in feedback with an LTI plant.

Time convention: the controller runs at unit speed and the plant at speed
``1/epsilon``::

    x'      = (A x + B u + Bw w) / epsilon
    u'      = -grad f(u) - Pi1u' grad h(y1) - Pi2u' grad M_g(y2 + mu lambda)
    lambda' = mu (grad M_g(y2 + mu lambda) - lambda) - gammaQ lambda

so ``epsilon < 1`` is the usual time-scale separation (fast plant, slow
optimizer) and ``epsilon = 1`` is the plain online scheme. Measured in plant
time this is the controller slowed down by ``epsilon``. The matrices of
:func:`feedbackopt.lti.assemble_interconnection` with the same ``epsilon``
describe exactly this loop, so a certificate for them bounds the simulated
error with the certified rate.
"""

from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .lti import Interconnection, StateSpace, SteadyStateMaps, assemble_interconnection, steady_state_maps
from .oracle import FrozenProblem, solve_frozen, stationary_state
from .prox import DeltaMap

__all__ = [
    "DivergenceError",
    "ControllerState",
    "ClosedLoop",
    "Segment",
    "Disturbance",
    "Scenario",
    "TrajectoryLog",
    "rhs",
    "integrate",
    "integrate_open_loop",
    "stationarity_residual",
    "default_dt",
]

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e9


class DivergenceError(RuntimeError):
    """State norm blew up; ``log`` holds the trajectory up to that point."""

    def __init__(self, msg, log=None):
        super().__init__(msg)
        self.log = log


@dataclass(frozen=True)
class ControllerState:
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray

    def stack(self) -> np.ndarray:
        return np.concatenate([self.x, self.u, self.lam])


@dataclass(frozen=True)
class ClosedLoop:
    sys: StateSpace
    delta: DeltaMap
    gammaQ: Optional[np.ndarray] = None
    epsilon: float = 1.0
    maps: Optional[SteadyStateMaps] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        m, p1, p2 = self.delta.dims
        if (m, p1, p2) != (self.sys.m, self.sys.p1, self.sys.p2):
            raise ValueError(f"plant dims (m,p1,p2)={(self.sys.m, self.sys.p1, self.sys.p2)} "
                             f"do not match the nonlinearity dims {(m, p1, p2)}")
        if self.maps is None:
            object.__setattr__(self, "maps", steady_state_maps(self.sys))
        if self.gammaQ is not None:
            GQ = np.asarray(self.gammaQ, dtype=float).reshape(p2, p2)
            object.__setattr__(self, "gammaQ", GQ)
            if not self.regularization_ok():
                warnings.warn("null(Pi2u Pi2u') and null(Q) intersect nontrivially; "
                              "the regularized loop is not covered by the time-scale result",
                              RuntimeWarning, stacklevel=2)

    @property
    def mu(self) -> float:
        return self.delta.mu

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.sys.n,) + self.delta.dims

    @property
    def nz(self) -> int:
        n, m, _, p2 = self.dims
        return n + m + p2

    @property
    def gammaQ_or_none(self):
        if self.gammaQ is None or not np.any(self.gammaQ):
            return None
        return self.gammaQ

    def regularization_ok(self, tol: float = 1e-9) -> bool:
        """``null(Pi2u Pi2u') ∩ null(gammaQ) = {0}``."""
        P = self.maps.Pi2u @ self.maps.Pi2u.T
        Q = np.zeros_like(P) if self.gammaQ is None else self.gammaQ
        return bool(np.linalg.eigvalsh(P + Q).min() > tol * max(1.0, np.abs(P).max()))

    def split(self, z) -> ControllerState:
        n, m, _, _ = self.dims
        z = np.asarray(z, dtype=float)
        return ControllerState(z[:n], z[n:n + m], z[n + m:])

    def interconnection(self) -> Interconnection:
        return assemble_interconnection(self.sys, self.delta.m_strong(), self.mu,
                                        self.gammaQ, self.epsilon, maps=self.maps)

    def with_epsilon(self, epsilon: float) -> "ClosedLoop":
        return replace(self, epsilon=epsilon)


def _field(loop: ClosedLoop, z: np.ndarray, specs, w: np.ndarray) -> np.ndarray:
    sys, mp, mu = loop.sys, loop.maps, loop.mu
    n, m, p1, p2 = loop.dims
    f, h, g = specs
    x, u, lam = z[:n], z[n:n + m], z[n + m:]
    dx = (sys.A @ x + sys.B @ u + sys.Bw @ w) / loop.epsilon
    du = -f.grad(u)
    if p1:
        du -= mp.Pi1u.T @ h.grad(sys.C1 @ x + sys.D1w @ w)
    v = sys.C2 @ x + sys.D2w @ w + mu * lam
    gm = (v - g.prox(v, mu)) / mu
    du -= mp.Pi2u.T @ gm
    dl = mu * (gm - lam)
    if loop.gammaQ is not None:
        dl -= loop.gammaQ @ lam
    return np.concatenate([dx, du, dl])


def _as_state(loop: ClosedLoop, z) -> np.ndarray:
    if isinstance(z, ControllerState):
        z = z.stack()
    z = np.asarray(z, dtype=float)
    if z.shape != (loop.nz,):
        raise ValueError(f"state must have length {loop.nz}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite state")
    return z


def rhs(loop: ClosedLoop, z, t: float, w) -> np.ndarray:
    """Time derivative of the stacked state ``z = (x, u, lambda)``."""
    z = _as_state(loop, z)
    w = np.asarray(w, dtype=float).reshape(loop.sys.q)
    return _field(loop, z, loop.delta.specs_at(t), w)


def stationarity_residual(loop: ClosedLoop, z, t: float, w) -> float:
    """``||rhs(z)|| / (1 + ||z||)``; zero exactly at the time-``t`` stationary point."""
    z = _as_state(loop, z)
    return float(np.linalg.norm(rhs(loop, z, t, w)) / (1.0 + np.linalg.norm(z)))


@dataclass(frozen=True)
class Segment:
    """``w(t) = offset + amplitude * cos(omega t + phase)`` from ``start`` on (absolute time)."""

    start: float
    offset: np.ndarray
    amplitude: Optional[np.ndarray] = None
    omega: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        off = np.atleast_1d(np.asarray(self.offset, dtype=float))
        amp = np.zeros_like(off) if self.amplitude is None else \
            np.broadcast_to(np.asarray(self.amplitude, dtype=float), off.shape).copy()
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "amplitude", amp)

    def __call__(self, t: float) -> np.ndarray:
        if not np.any(self.amplitude):
            return self.offset.copy()
        return self.offset + self.amplitude * math.cos(self.omega * t + self.phase)

    def to_dict(self) -> dict:
        return {"start": self.start, "offset": self.offset.tolist(),
                "amplitude": self.amplitude.tolist(), "omega": self.omega, "phase": self.phase}


@dataclass(frozen=True)
class Disturbance:
    """Piecewise disturbance; segment ``k`` is active on ``[start_k, start_{k+1})``."""

    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("at least one segment is required")
        starts = [s.start for s in segs]
        if starts[0] != 0.0:
            raise ValueError("the first segment must start at t=0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segments must have strictly increasing start times")
        if len({s.offset.size for s in segs}) != 1:
            raise ValueError("segments disagree on the disturbance dimension")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, w) -> "Disturbance":
        return cls((Segment(0.0, w),))

    @property
    def dim(self) -> int:
        return self.segments[0].offset.size

    def index(self, t: float) -> int:
        if t < 0:
            raise ValueError("disturbance undefined for t < 0")
        return bisect.bisect_right([s.start for s in self.segments], t) - 1

    def __call__(self, t: float) -> np.ndarray:
        return self.segments[self.index(t)](t)


@dataclass(frozen=True)
class Scenario:
    t_end: float
    dt: float
    w: Disturbance
    z0: np.ndarray
    events: Optional[tuple] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=float))
        if self.events is not None:
            object.__setattr__(self, "events", tuple(self.events))

    @property
    def n_samples(self) -> int:
        return int(math.floor(self.t_end / self.dt + 1e-9)) + 1


@dataclass
class TrajectoryLog:
    times: np.ndarray
    z: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    dims: tuple
    zstar: Optional[np.ndarray] = None
    err: Optional[np.ndarray] = None
    oracle_index: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.z[:, : self.dims[0]]

    @property
    def u(self):
        n, m = self.dims[:2]
        return self.z[:, n:n + m]

    @property
    def lam(self):
        n, m = self.dims[:2]
        return self.z[:, n + m:]

    def header(self) -> list[str]:
        n, m, p1, p2 = self.dims
        cols = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
        cols += [f"lambda_{i + 1}" for i in range(self.lam.shape[1])]
        cols += [f"y1_{i + 1}" for i in range(p1)] + [f"y2_{i + 1}" for i in range(p2)]
        cols.append("err")
        if self.zstar is not None:
            cols += [f"zstar_{i + 1}" for i in range(self.zstar.shape[1])]
        return cols

    def to_csv(self, path=None) -> str:
        """Write ``t,x_*,u_*,lambda_*,y1_*,y2_*,err[,zstar_*]`` with 9 significant digits."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.header())
        err = self.err if self.err is not None else np.full(len(self.times), np.nan)
        data = [self.times[:, None], self.z, self.y1, self.y2, err[:, None]]
        if self.zstar is not None:
            data.append(self.zstar)
        table = np.hstack(data)
        for row in table:
            wr.writerow([f"{v:.9g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def default_dt(loop: ClosedLoop) -> float:
    """A 1-2-5 rounded step of about ``1.5 / spectral_radius`` of the linear part."""
    rad = float(np.max(np.abs(np.linalg.eigvals(loop.interconnection().A))))
    raw = min(0.05, 1.5 / max(rad, 1e-12))
    dec = 10.0 ** math.floor(math.log10(raw))
    for k in (5.0, 2.0, 1.0):
        if k * dec <= raw:
            return k * dec
    return dec


def _snap(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        log.warning("event at t=%g snapped to grid point %g", t, k * dt)
    return k


def integrate(loop: ClosedLoop, scenario: Scenario, with_oracle: bool = False,
              oracle_stride: int = 10, oracle_tol: float = 1e-9) -> TrajectoryLog:
    """Fixed-step RK4 simulation of the closed loop.

    Parameter events and disturbance segment switches are snapped to the step
    grid; within a step every stage uses the parameters and segment that are
    active at the step's left end, while sinusoidal segments are evaluated at
    the stage time.

    With ``with_oracle`` the frozen-time optimum is computed every
    ``oracle_stride`` samples (plus at both sides of each snapped switch) and
    linearly interpolated in between to form the error column.

    Raises
    ------
    DivergenceError
        If ``||z||`` exceeds ``1e9``; the partial log is attached.
    """
    if scenario.w.dim != loop.sys.q:
        raise ValueError("disturbance dimension does not match the plant")
    if scenario.events is not None:
        loop = replace(loop, delta=loop.delta.with_schedule(scenario.events))
    dt, N = scenario.dt, scenario.n_samples
    z = _as_state(loop, scenario.z0).copy()
    n, m, p1, p2 = loop.dims
    sys = loop.sys

    ev_steps = [_snap(e.t, dt) for e in loop.delta.schedule]
    states = loop.delta._states
    seg_steps = [_snap(s.start, dt) for s in scenario.w.segments]
    segs = scenario.w.segments

    times = np.arange(N) * dt
    Z = np.empty((N, loop.nz))
    Y1 = np.empty((N, p1))
    Y2 = np.empty((N, p2))

    def record(k, zk):
        Z[k] = zk
        seg = segs[bisect.bisect_right(seg_steps, k) - 1]
        wk = seg(times[k])
        Y1[k] = sys.C1 @ zk[:n] + sys.D1w @ wk
        Y2[k] = sys.C2 @ zk[:n] + sys.D2w @ wk

    record(0, z)
    for k in range(N - 1):
        specs = states[bisect.bisect_right(ev_steps, k)]
        seg = segs[bisect.bisect_right(seg_steps, k) - 1]
        t = times[k]
        w0, wh, w1 = seg(t), seg(t + 0.5 * dt), seg(t + dt)
        k1 = _field(loop, z, specs, w0)
        k2 = _field(loop, z + 0.5 * dt * k1, specs, wh)
        k3 = _field(loop, z + 0.5 * dt * k2, specs, wh)
        k4 = _field(loop, z + dt * k3, specs, w1)
        z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nrm = np.linalg.norm(z)
        if not nrm <= DIVERGENCE_NORM:
            partial = TrajectoryLog(times[:k + 1], Z[:k + 1], Y1[:k + 1], Y2[:k + 1], loop.dims)
            raise DivergenceError(f"state norm {nrm:.3e} exceeded {DIVERGENCE_NORM:.0e} "
                                  f"at t={times[k + 1]:.6g}", log=partial)
        record(k + 1, z)

    out = TrajectoryLog(times, Z, Y1, Y2, loop.dims)
    if with_oracle:
        _attach_oracle(out, loop, scenario, ev_steps, seg_steps, oracle_stride, oracle_tol)
    return out


def _attach_oracle(out: TrajectoryLog, loop: ClosedLoop, scenario: Scenario, ev_steps,
                   seg_steps, stride: int, tol: float):
    N = len(out.times)
    idx = set(range(0, N, max(1, int(stride))))
    idx.add(N - 1)
    for k in list(ev_steps) + list(seg_steps[1:]):
        for j in (k - 1, k):
            if 0 <= j < N:
                idx.add(j)
    idx = np.array(sorted(idx))
    states = loop.delta._states
    segs = scenario.w.segments
    rows = []
    u0 = lam0 = None
    for k in idx:
        f, h, g = states[bisect.bisect_right(ev_steps, k)]
        wk = segs[bisect.bisect_right(seg_steps, k) - 1](out.times[k])
        prob = FrozenProblem(f, h, g, loop.maps, wk, loop.mu, loop.gammaQ_or_none)
        sol = solve_frozen(prob, tol=tol, u0=u0, lam0=lam0)
        u0, lam0 = sol.u, sol.lam
        rows.append(np.concatenate([stationary_state(loop.sys, sol.u, wk), sol.u, sol.lam]))
    S = np.array(rows)
    zstar = np.empty((N, S.shape[1]))
    for j in range(S.shape[1]):
        zstar[:, j] = np.interp(np.arange(N), idx, S[:, j])
    out.zstar = zstar
    out.oracle_index = idx
    out.err = np.linalg.norm(out.z - zstar, axis=1)


def integrate_open_loop(sys: StateSpace, u, scenario: Scenario, epsilon: float = 1.0) -> TrajectoryLog:
    """Plant alone with the input frozen at ``u`` (same time scale as :func:`integrate`).

    Only the first ``n`` entries of ``scenario.z0`` are used. The log has no
    multiplier columns and ``err`` is left empty.
    """
    u = np.asarray(u, dtype=float).reshape(sys.m)
    n = sys.n
    dt, N = scenario.dt, scenario.n_samples
    segs = scenario.w.segments
    seg_steps = [_snap(s.start, dt) for s in segs]
    times = np.arange(N) * dt
    Bu = sys.B @ u
    A = sys.A / epsilon
    X = np.empty((N, n))
    W = np.empty((N, sys.q))
    x = np.asarray(scenario.z0, dtype=float)[:n].copy()
    X[0] = x
    W[0] = segs[0](0.0)

    def fx(x, w):
        return A @ x + (Bu + sys.Bw @ w) / epsilon

    for k in range(N - 1):
        seg = segs[bisect.bisect_right(seg_steps, k) - 1]
        t = times[k]
        w0, wh, w1 = seg(t), seg(t + 0.5 * dt), seg(t + dt)
        k1 = fx(x, w0)
        k2 = fx(x + 0.5 * dt * k1, wh)
        k3 = fx(x + 0.5 * dt * k2, wh)
        k4 = fx(x + dt * k3, w1)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.linalg.norm(x) <= DIVERGENCE_NORM:
            raise DivergenceError(f"plant state diverged at t={times[k + 1]:.6g}")
        X[k + 1] = x
        W[k + 1] = segs[bisect.bisect_right(seg_steps, k + 1) - 1](times[k + 1])
    Z = np.hstack([X, np.tile(u, (N, 1))])
    Y1 = X @ sys.C1.T + W @ sys.D1w.T
    Y2 = X @ sys.C2.T + W @ sys.D2w.T
    return TrajectoryLog(times, Z, Y1, Y2, (n, sys.m, sys.p1, sys.p2))
