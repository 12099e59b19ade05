"""Reference solver for the frozen-time problem.

The unique primal-dual optimum of the augmented Lagrangian is computed by
integrating the offline saddle flow ``u' = -grad_u L``, ``lambda' = grad_lambda L``
in pseudo-time. Steps are linearly implicit (pseudo-transient continuation):
the pseudo-time step grows as the residual shrinks, so the iteration turns
into a semismooth Newton method near the solution. This matters because the
field is skew-dominated and explicit steps crawl below ``1e-6``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .lti import SteadyStateMaps, StateSpace
from .prox import moreau_envelope_value

__all__ = [
    "NonConvergenceError",
    "FrozenProblem",
    "FrozenSolution",
    "OptimalTrajectory",
    "solve_frozen",
    "augmented_lagrangian",
    "optimal_trajectory",
    "stationary_state",
    "frozen_problem",
]

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    """Raised when the saddle flow stagnates above tolerance."""

    def __init__(self, msg, history=None, t=None):
        super().__init__(msg)
        self.history = history
        self.t = t


@dataclass(frozen=True)
class FrozenProblem:
    """``min f(u) + h(Pi1u u + Pi1w w) + g(Pi2u u + Pi2w w)`` at a fixed time.

    ``gammaQ`` selects the regularized stationarity conditions (dual leak
    ``-gammaQ lambda``); with ``gammaQ=None`` the problem is the exact one.
    """

    f: object
    h: Optional[object]
    g: Optional[object]
    maps: SteadyStateMaps
    w: np.ndarray
    mu: float
    gammaQ: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.f.dim

    @property
    def p2(self) -> int:
        return 0 if self.g is None else self.g.dim

    def field(self, u, lam) -> tuple[np.ndarray, np.ndarray]:
        """Saddle-flow vector field ``(u', lambda')``."""
        mp = self.maps
        du = -self.f.grad(u)
        if self.h is not None:
            du = du - mp.Pi1u.T @ self.h.grad(mp.Pi1u @ u + mp.Pi1w @ self.w)
        if self.g is None:
            return du, np.zeros(0)
        v = mp.Pi2u @ u + mp.Pi2w @ self.w + self.mu * lam
        gm = (v - self.g.prox(v, self.mu)) / self.mu
        du = du - mp.Pi2u.T @ gm
        dl = self.mu * (gm - lam)
        if self.gammaQ is not None:
            dl = dl - self.gammaQ @ lam
        return du, dl

    def jacobian(self, u, lam) -> np.ndarray:
        """A generalized Jacobian of :meth:`field` (one-sided at kinks)."""
        mp, m, p2 = self.maps, self.m, self.p2
        J = np.zeros((m + p2, m + p2))
        Juu = -self.f.hessian(u)
        if self.h is not None:
            Juu = Juu - mp.Pi1u.T @ self.h.hessian(mp.Pi1u @ u + mp.Pi1w @ self.w) @ mp.Pi1u
        if p2:
            v = mp.Pi2u @ u + mp.Pi2w @ self.w + self.mu * lam
            D = (np.eye(p2) - self.g.prox_jacobian(v, self.mu)) / self.mu
            Juu = Juu - mp.Pi2u.T @ D @ mp.Pi2u
            J[:m, m:] = -self.mu * mp.Pi2u.T @ D
            J[m:, :m] = self.mu * D @ mp.Pi2u
            J[m:, m:] = self.mu ** 2 * D - self.mu * np.eye(p2)
            if self.gammaQ is not None:
                J[m:, m:] -= self.gammaQ
        J[:m, :m] = Juu
        return J


@dataclass
class FrozenSolution:
    u: np.ndarray
    lam: np.ndarray
    residual: float
    iterations: int
    history: list = field(default_factory=list)


def solve_frozen(prob: FrozenProblem, tol: float = 1e-9, max_iter: int = 2000,
                 u0=None, lam0=None) -> FrozenSolution:
    """Integrate the offline saddle flow to its (unique) rest point.

    Parameters
    ----------
    prob : FrozenProblem
    tol : float
        Absolute tolerance on the Euclidean norm of the stacked field.
    max_iter : int
        Budget of accepted plus rejected pseudo-time steps.
    u0, lam0 : array_like, optional
        Warm start; zeros by default.

    Raises
    ------
    NonConvergenceError
        If the residual is still above ``tol`` after ``max_iter`` steps.
    """
    m, p2 = prob.m, prob.p2
    z = np.zeros(m + p2)
    if u0 is not None:
        z[:m] = u0
    if lam0 is not None and p2:
        z[m:] = lam0

    def F(zz):
        du, dl = prob.field(zz[:m], zz[m:])
        return np.concatenate([du, dl])

    Fz = F(z)
    r = float(np.linalg.norm(Fz))
    history = [r]
    J = prob.jacobian(z[:m], z[m:])
    alpha = 1.0 / (1.0 + np.linalg.norm(J, 2))
    eye = np.eye(m + p2)
    it = 0
    while r > tol and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(eye / alpha - J, Fz)
        except np.linalg.LinAlgError:
            alpha *= 0.25
            continue
        z_new = z + step
        F_new = F(z_new)
        r_new = float(np.linalg.norm(F_new))
        if not np.isfinite(r_new) or r_new > r * (1.0 + 1e-12) + 1e-300:
            alpha *= 0.25
            if alpha > 1e-14:
                continue
            alpha = 1e-14
        alpha = min(alpha * max(r / max(r_new, 1e-300), 2.0), 1e16)
        z, Fz, r = z_new, F_new, r_new
        history.append(r)
        J = prob.jacobian(z[:m], z[m:])
    if r > tol:
        raise NonConvergenceError(
            f"saddle flow stagnated at residual {r:.3e} > tol {tol:.1e} after {it} steps",
            history=history)
    return FrozenSolution(z[:m].copy(), z[m:].copy(), r, it, history)


def augmented_lagrangian(prob: FrozenProblem, u, lam) -> float:
    """Proximal augmented Lagrangian ``L_mu(u, lambda)``."""
    mp = prob.maps
    val = prob.f.value(u)
    if prob.h is not None:
        val += prob.h.value(mp.Pi1u @ u + mp.Pi1w @ prob.w)
    if prob.g is not None:
        v = mp.Pi2u @ u + mp.Pi2w @ prob.w + prob.mu * lam
        val += moreau_envelope_value(prob.g, v, prob.mu) - 0.5 * prob.mu * float(lam @ lam)
    return float(val)


def stationary_state(sys: StateSpace, u, w) -> np.ndarray:
    """Plant equilibrium ``-A^-1 (B u + Bw w)``."""
    return -np.linalg.solve(sys.A, sys.B @ u + sys.Bw @ w)


@dataclass
class OptimalTrajectory:
    times: np.ndarray
    zstar: np.ndarray
    zstar_dot: np.ndarray
    residuals: np.ndarray


def optimal_trajectory(loop, w: Callable[[float], np.ndarray], times: Sequence[float],
                       tol: float = 1e-9, max_iter: int = 2000) -> OptimalTrajectory:
    """Warm-started frozen solves ``z*(t) = (x_bar, u*, lambda*)`` along ``times``.

    ``loop`` is a :class:`feedbackopt.saddleflow.ClosedLoop`; the regularized
    stationary point is returned when the loop carries ``gammaQ``. Time
    derivatives are central finite differences (one-sided at the ends).
    """
    times = np.asarray(times, dtype=float)
    maps = loop.maps
    sys = loop.sys
    rows, res = [], []
    u0 = lam0 = None
    for t in times:
        wt = np.asarray(w(t), dtype=float)
        f, h, g = loop.delta.specs_at(t)
        prob = FrozenProblem(f, h, g, maps, wt, loop.mu, loop.gammaQ_or_none)
        try:
            sol = solve_frozen(prob, tol=tol, max_iter=max_iter, u0=u0, lam0=lam0)
        except NonConvergenceError as exc:
            exc.t = float(t)
            raise NonConvergenceError(f"at t={t}: {exc}", exc.history, float(t)) from exc
        u0, lam0 = sol.u, sol.lam
        rows.append(np.concatenate([stationary_state(sys, sol.u, wt), sol.u, sol.lam]))
        res.append(sol.residual)
    Z = np.array(rows)
    if len(times) > 1:
        Zdot = np.gradient(Z, times, axis=0)
    else:
        Zdot = np.zeros_like(Z)
    return OptimalTrajectory(times, Z, Zdot, np.array(res))


def frozen_problem(loop, t: float, w) -> FrozenProblem:
    f, h, g = loop.delta.specs_at(t)
    return FrozenProblem(f, h, g, loop.maps, np.asarray(w, dtype=float), loop.mu,
                         loop.gammaQ_or_none)
