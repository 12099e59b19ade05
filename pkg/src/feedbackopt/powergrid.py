"""Linearized swing-equation grids and DC-OPF feedback controllers.

Angles and frequencies of all buses evolve as

    theta' = omega
    M omega' = -Y theta - D omega + B1 u + B2 w

with ``Y`` the susceptance Laplacian. Outputs are the line flows
``p = E theta`` and the mean frequency. The rotational mode
``(1, 0)`` is removed with an orthonormal basis ``U`` of ``1^perp`` built from
eigenvectors of ``Y``, which leaves a Hurwitz plant with the same outputs.
Everything is in per unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .lti import StateSpace, hurwitz_check
from .oracle import FrozenProblem, solve_frozen, stationary_state
from .prox import BoxIndicator, Composite, DeltaMap, Event, Quadratic, SoftBoxPenalty, ZeroSetIndicator
from .saddleflow import ClosedLoop, Disturbance, Scenario, Segment

__all__ = [
    "GridModel",
    "SwingModel",
    "ReducedPlant",
    "load_case",
    "build_swing",
    "reduce",
    "build_dcopf",
    "GridCase",
    "ieee9_case",
]


@dataclass(frozen=True)
class GridModel:
    """Lossless transmission grid.

    Buses are indexed from 0 internally; ``lines`` holds ``(from, to, b)``
    with susceptance ``b = 1/x``.
    """

    lines: tuple
    M: np.ndarray
    D: np.ndarray
    gen_buses: tuple
    load_buses: tuple
    p_min: Optional[np.ndarray] = None
    p_max: Optional[np.ndarray] = None
    name: str = "grid"

    def __post_init__(self):
        M = np.atleast_1d(np.asarray(self.M, dtype=float))
        D = np.atleast_1d(np.asarray(self.D, dtype=float))
        if M.ndim == 2:
            M = np.diag(M)
        if D.ndim == 2:
            D = np.diag(D)
        if M.shape != D.shape:
            raise ValueError("M and D must have one entry per bus")
        if np.any(M <= 0) or np.any(D <= 0):
            raise ValueError("inertia and damping must be positive")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "lines", tuple((int(a), int(b), float(s)) for a, b, s in self.lines))
        n = M.size
        for a, b, s in self.lines:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"bad line ({a}, {b})")
            if not s > 0:
                raise ValueError("line susceptances must be positive")
        nl = len(self.lines)
        lo = np.full(nl, -np.inf) if self.p_min is None else np.asarray(self.p_min, dtype=float)
        hi = np.full(nl, np.inf) if self.p_max is None else np.asarray(self.p_max, dtype=float)
        object.__setattr__(self, "p_min", lo)
        object.__setattr__(self, "p_max", hi)

    @property
    def n_bus(self) -> int:
        return self.M.size

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def incidence(self) -> np.ndarray:
        Bc = np.zeros((self.n_bus, self.n_line))
        for k, (a, b, _) in enumerate(self.lines):
            Bc[a, k], Bc[b, k] = 1.0, -1.0
        return Bc

    @property
    def susceptances(self) -> np.ndarray:
        return np.array([s for _, _, s in self.lines])

    @property
    def Y(self) -> np.ndarray:
        Bc = self.incidence
        return Bc @ np.diag(self.susceptances) @ Bc.T

    @property
    def E(self) -> np.ndarray:
        return np.diag(self.susceptances) @ self.incidence.T


def load_case(source) -> tuple[GridModel, dict]:
    """Read a JSON case (path, dict or builtin name ``"ieee9"``).

    Returns the grid and the raw document (for extra fields such as nominal loads).
    """
    if isinstance(source, dict):
        doc = source
    elif source == "ieee9":
        doc = json.loads(resources.files("feedbackopt").joinpath("data/ieee9.json").read_text())
    else:
        with open(source) as fh:
            doc = json.load(fh)
    ids = [b["id"] for b in doc["buses"]]
    pos = {i: k for k, i in enumerate(ids)}
    lines = [(pos[l["from"]], pos[l["to"]], l["b"] if "b" in l else 1.0 / l["x"]) for l in doc["lines"]]
    grid = GridModel(
        lines=tuple(lines),
        M=np.array([b["m"] for b in doc["buses"]]),
        D=np.array([b["d"] for b in doc["buses"]]),
        gen_buses=tuple(pos[i] for i in doc["gens"]),
        load_buses=tuple(pos[i] for i in doc["loads"]),
        p_min=np.array([l.get("p_min", -np.inf) for l in doc["lines"]], dtype=float),
        p_max=np.array([l.get("p_max", np.inf) for l in doc["lines"]], dtype=float),
        name=doc.get("name", "grid"),
    )
    return grid, doc


@dataclass(frozen=True)
class SwingModel:
    A: np.ndarray
    Bu: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    Y: np.ndarray
    n_line: int


def build_swing(grid: GridModel) -> SwingModel:
    """Unreduced swing model with outputs ``(line flows, mean frequency)``."""
    n = grid.n_bus
    Y = grid.Y
    if np.linalg.eigvalsh(Y)[1] <= 1e-9 * max(1.0, np.abs(Y).max()):
        raise ValueError("line graph is disconnected")
    Mi = np.diag(1.0 / grid.M)
    A = np.block([[np.zeros((n, n)), np.eye(n)], [-Mi @ Y, -Mi @ np.diag(grid.D)]])
    B1 = np.zeros((n, len(grid.gen_buses)))
    B1[list(grid.gen_buses), range(len(grid.gen_buses))] = 1.0
    B2 = np.zeros((n, len(grid.load_buses)))
    B2[list(grid.load_buses), range(len(grid.load_buses))] = 1.0
    Bu = np.vstack([np.zeros_like(B1), Mi @ B1])
    Bw = np.vstack([np.zeros_like(B2), Mi @ B2])
    C = np.block([[grid.E, np.zeros((grid.n_line, n))],
                  [np.zeros((1, n)), np.full((1, n), 1.0 / n)]])
    return SwingModel(A, Bu, Bw, C, Y, grid.n_line)


@dataclass(frozen=True)
class ReducedPlant:
    U: np.ndarray
    T: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    n_line: int

    def plant(self, split: str = "soft") -> StateSpace:
        """State-space plant; ``split="soft"`` puts line flows in ``y1`` and
        the frequency in ``y2``, ``"hard"`` puts all outputs in ``y2``."""
        nl = self.n_line
        if split == "soft":
            return StateSpace.build(self.A, self.B, self.Bw, C1=self.C[:nl], C2=self.C[nl:])
        if split == "hard":
            return StateSpace.build(self.A, self.B, self.Bw, C1=np.zeros((0, self.A.shape[0])),
                                    C2=self.C)
        raise ValueError(f"unknown output split {split!r}")


def reduce(swing: SwingModel) -> ReducedPlant:
    """Remove the rotational mode with ``T = blockdiag(U, I)``."""
    n = swing.Y.shape[0]
    ev, V = np.linalg.eigh(swing.Y)
    U = V[:, 1:]  # eigenvalue 0 (eigenvector 1/sqrt(n)) comes first for a connected graph
    T = sla.block_diag(U, np.eye(n))
    A = T.T @ swing.A @ T
    ok, absc = hurwitz_check(A)
    if not ok:
        raise ValueError(f"reduced swing model is not Hurwitz (abscissa {absc:.3e}); check damping")
    return ReducedPlant(U, T, A, T.T @ swing.Bu, T.T @ swing.Bw, swing.C @ T, swing.n_line)


def _limit_states(grid: GridModel, limit_events):
    """Cumulative ``(t, lo, hi)`` list; events are ``(t, line, p_max)`` with symmetric limits."""
    lo, hi = grid.p_min.copy(), grid.p_max.copy()
    out = []
    for t, line, pmax in sorted(limit_events, key=lambda e: e[0]):
        lo, hi = lo.copy(), hi.copy()
        lo[line], hi[line] = -pmax, pmax
        out.append((float(t), lo, hi))
    return out


def build_dcopf(grid: GridModel, reduced: ReducedPlant, mode: str, mu: float = 4.0,
                eta: Optional[float] = None, gamma: Optional[float] = None,
                H=None, c=None, limit_events=()):
    """DC-OPF controller data for ``min 1/2 u'Hu + c'u`` subject to line limits and zero frequency.

    Parameters
    ----------
    mode : {"soft", "approximate"}
        ``"soft"``: quadratic penalty of weight ``eta`` on line-limit
        violations, hard zero-frequency constraint.
        ``"approximate"``: hard box on the line flows and zero frequency,
        with dual regularization ``gamma`` on the line multipliers only.
    limit_events : sequence of (t, line, p_max)
        Symmetric line-limit changes (the limit stays until the next event).

    Returns
    -------
    plant : StateSpace
    delta : DeltaMap
    gammaQ : ndarray or None
    """
    m = len(grid.gen_buses)
    H = np.eye(m) if H is None else np.asarray(H, dtype=float)
    c = np.ones(m) if c is None else np.asarray(c, dtype=float)
    f = Quadratic(H, c)
    nl = grid.n_line
    states = _limit_states(grid, limit_events)
    if mode == "soft":
        if eta is None or gamma is not None:
            raise ValueError("soft mode takes eta (and no gamma)")
        h = SoftBoxPenalty(eta, grid.p_min, grid.p_max)
        delta = DeltaMap(f, h, ZeroSetIndicator(1), mu,
                         tuple(Event(t, h=SoftBoxPenalty(eta, lo, hi)) for t, lo, hi in states))
        return reduced.plant("soft"), delta, None
    if mode == "approximate":
        if gamma is None or eta is not None:
            raise ValueError("approximate mode takes gamma (and no eta)")

        def g_of(lo, hi):
            return Composite((BoxIndicator(lo, hi), ZeroSetIndicator(1)))

        delta = DeltaMap(f, None, g_of(grid.p_min, grid.p_max), mu,
                         tuple(Event(t, g=g_of(lo, hi)) for t, lo, hi in states))
        Q = np.diag(np.r_[np.ones(nl), 0.0])
        return reduced.plant("hard"), delta, gamma * Q
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class GridCase:
    """A grid, its reduced plant, a disturbance and a line-limit schedule."""

    grid: GridModel
    reduced: ReducedPlant
    disturbance: Disturbance
    limit_events: tuple = ()
    defaults: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.grid.name

    @property
    def n_line(self) -> int:
        return self.grid.n_line

    def limits_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.grid.p_min, self.grid.p_max
        for te, l, h in _limit_states(self.grid, self.limit_events):
            if te <= t:
                lo, hi = l, h
        return lo, hi

    def flows_and_frequency(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Line flows and mean frequency for reduced states ``x`` (one per row)."""
        y = np.atleast_2d(x) @ self.reduced.C.T
        return y[:, : self.n_line], y[:, self.n_line]

    def plant(self) -> StateSpace:
        return self.reduced.plant("soft")

    def loop(self, mode: str, mu: float = 4.0, eta: Optional[float] = None,
             gamma: Optional[float] = None, epsilon: float = 1e-2) -> ClosedLoop:
        """Closed loop for ``mode`` in {"soft", "approximate"}."""
        plant, delta, gq = build_dcopf(self.grid, self.reduced, mode, mu=mu, eta=eta, gamma=gamma,
                                       limit_events=self.limit_events)
        return ClosedLoop(plant, delta, gq, epsilon)

    def equilibrium(self, loop: ClosedLoop, t: float = 0.0) -> np.ndarray:
        """Stationary ``(x, u, lambda)`` for the parameters and load active at ``t``."""
        w = self.disturbance(t)
        f, h, g = loop.delta.specs_at(t)
        sol = solve_frozen(FrozenProblem(f, h, g, loop.maps, w, loop.mu, loop.gammaQ_or_none))
        return np.concatenate([stationary_state(loop.sys, sol.u, w), sol.u, sol.lam])

    def scenario(self, loop: ClosedLoop, t_end: float = 100.0, dt: float = 1e-3) -> Scenario:
        """Run starting at rest at the ``t = 0`` optimum."""
        return Scenario(t_end, dt, self.disturbance, self.equilibrium(loop, 0.0))


def ieee9_case() -> GridCase:
    """Lossless IEEE 9-bus system with a line-1 limit drop on [10, 20) and a load swing after 50."""
    grid, doc = load_case("ieee9")
    w0 = np.asarray(doc["nominal_load"], dtype=float)
    dist = Disturbance((Segment(0.0, w0),
                        Segment(50.0, w0, amplitude=np.array([w0[0], 0.0, 0.0]), omega=0.2)))
    events = ((10.0, 0, 0.5), (20.0, 0, 1.5))
    defaults = {"mu": 4.0, "eta": 4.0, "gamma": 1e-2, "epsilon": 1e-2, "dt": 1e-3, "t_end": 100.0}
    return GridCase(grid, reduce(build_swing(grid)), dist, events, defaults)
