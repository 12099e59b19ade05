"""Exponential-stability certificates for the saddle-flow loop.

The loop nonlinearity satisfies a pointwise incremental quadratic constraint
with the static multiplier assembled by :func:`build_multiplier`. A quadratic
Lyapunov function ``(z - z*)' P (z - z*)`` decaying at rate ``rho`` exists when
the matrix inequality of :func:`lmi_matrix` is negative semidefinite for some
``P > 0`` and multiplier weights ``phi1, phi2 >= 0``.

Besides the LMI search there are frequency-domain screens: the sampled
frequency inequality, the ``epsilon -> 0`` limit transfer function and the
closed-form time-scale conditions.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .lti import Interconnection, SteadyStateMaps

__all__ = [
    "InfeasibleError",
    "build_multiplier",
    "iqc_residual",
    "lmi_matrix",
    "Certificate",
    "lmi_feasibility",
    "certify_loop",
    "limit_transfer_H",
    "interconnection_transfer",
    "default_frequency_grid",
    "fdi_sampled_check",
    "timescale_condition",
    "find_max_rho",
]

log = logging.getLogger(__name__)


class InfeasibleError(ValueError):
    """No certificate at the lower end of a rate search range."""


def build_multiplier(Lf_hat: float, Lh: float, phi1: float, phi2: float, dims,
                     phi3: float = 1.0) -> np.ndarray:
    """Static multiplier for the stacked nonlinearity.

    Parameters
    ----------
    Lf_hat : float
        ``L_f - m``, sector bound of ``grad f - m I``.
    Lh : float
        Lipschitz constant of ``grad h``.
    phi1, phi2 : float
        Nonnegative weights of the first two channels.
    dims : tuple
        ``(m, p1, p2)``.
    phi3 : float
        Weight of the prox channel, 1 in the standard normalization.

    Returns
    -------
    ndarray
        Symmetric ``2(m+p1+p2)`` square matrix ``[[0, S], [S, R]]`` with
        ``S = diag(phi1 Lf_hat I, phi2 Lh I, phi3 I)`` and
        ``R = -2 diag(phi1 I, phi2 I, phi3 I)``.
    """
    vals = dict(Lf_hat=Lf_hat, Lh=Lh, phi1=phi1, phi2=phi2, phi3=phi3)
    for k, v in vals.items():
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{k} must be a nonnegative number, got {v}")
    m, p1, p2 = (int(d) for d in dims)
    s = np.concatenate([np.full(m, phi1 * Lf_hat), np.full(p1, phi2 * Lh), np.full(p2, phi3)])
    r = -2.0 * np.concatenate([np.full(m, phi1), np.full(p1, phi2), np.full(p2, phi3)])
    ny = m + p1 + p2
    Xi = np.zeros((2 * ny, 2 * ny))
    Xi[:ny, ny:] = np.diag(s)
    Xi[ny:, :ny] = np.diag(s)
    Xi[ny:, ny:] = np.diag(r)
    return Xi


def iqc_residual(Xi, y_pair, u_pair) -> float:
    """``[(y - yh); (u - uh)]' Xi [(y - yh); (u - uh)]`` for ``u = Delta(y)``, ``uh = Delta(yh)``."""
    Xi = np.asarray(Xi, dtype=float)
    y, yh = (np.asarray(a, dtype=float).ravel() for a in y_pair)
    u, uh = (np.asarray(a, dtype=float).ravel() for a in u_pair)
    if not (y.shape == yh.shape == u.shape == uh.shape) or Xi.shape != (2 * y.size, 2 * y.size):
        raise ValueError("dimension mismatch between multiplier and signal pairs")
    d = np.concatenate([y - yh, u - uh])
    return float(d @ Xi @ d)


def lmi_matrix(inter: Interconnection, rho: float, P, Xi) -> np.ndarray:
    """``[[Ar'P + P Ar, P B], [B'P, 0]] + [C 0; 0 I]' Xi [C 0; 0 I]`` with ``Ar = A + rho I``."""
    Ar = inter.shifted(rho)
    P = np.asarray(P, dtype=float)
    ny = inter.ny
    top = np.hstack([Ar.T @ P + P @ Ar, P @ inter.B])
    bot = np.hstack([inter.B.T @ P, np.zeros((ny, ny))])
    CI = sla.block_diag(inter.C, np.eye(ny))
    L = np.vstack([top, bot]) + CI.T @ Xi @ CI
    return 0.5 * (L + L.T)


@dataclass
class Certificate:
    feasible: bool
    rho: float
    phi1: float
    phi2: float
    P: Optional[np.ndarray]
    kappaP: float
    margin: float
    method: str = "sdp"
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"feasible": bool(self.feasible), "rho": self.rho, "phi1": self.phi1,
                "phi2": self.phi2, "kappaP": self.kappaP, "margin": self.margin,
                "P": None if self.P is None else self.P.tolist()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        P = None if d.get("P") is None else np.array(d["P"], dtype=float)
        return cls(bool(d["feasible"]), float(d["rho"]), float(d["phi1"]), float(d["phi2"]),
                   P, float(d["kappaP"]), float(d["margin"]))


def _verify(inter, rho, P, phi1, phi2, Lf_hat, Lh, margin_tol):
    """Check a candidate in plain floating point; returns (ok, margin, kappa)."""
    P = 0.5 * (P + P.T)
    ev = np.linalg.eigvalsh(P)
    Xi = build_multiplier(Lf_hat, Lh, max(phi1, 0.0), max(phi2, 0.0), inter.dims[1:])
    lam = float(np.linalg.eigvalsh(lmi_matrix(inter, rho, P, Xi))[-1])
    pos = ev[0] > 1e-8 * ev.sum() / ev.size
    kappa = float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf
    return bool(pos and lam <= -margin_tol), -lam, kappa


def _sdp(inter, rho, Lf_hat, Lh, solver):
    import cvxpy as cp

    n, m, p1, p2 = inter.dims
    N, ny = inter.nz, inter.ny
    Ar = inter.shifted(rho)
    P = cp.Variable((N, N), symmetric=True)
    phi = cp.Variable(3, nonneg=True)
    t = cp.Variable()
    blocks = [(k, d) for k, d in enumerate((m, p1, p2)) if d]
    scale = (Lf_hat, Lh, 1.0)
    s = cp.hstack([phi[k] * scale[k] * np.ones(d) for k, d in blocks])
    r = cp.hstack([phi[k] * np.ones(d) for k, d in blocks])
    # [C 0; 0 I]' Xi [C 0; 0 I] = [[0, C'S], [S C, R]]
    SC = cp.multiply(cp.reshape(s, (ny, 1), order="F"), inter.C)
    L = cp.bmat([[Ar.T @ P + P @ Ar, P @ inter.B + SC.T],
                 [inter.B.T @ P + SC, -2 * cp.diag(r)]])
    L = 0.5 * (L + L.T)
    cons = [L << -t * np.eye(N + ny), P >> 0, cp.trace(P) == N]
    prob = cp.Problem(cp.Maximize(t), cons)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            prob.solve(solver=solver)
    except Exception as exc:  # solver failures are reported, not raised
        return None, {"status": f"solver error: {exc}"}
    # accuracy warnings are moot: the candidate is re-verified in numpy anyway
    info = {"status": prob.status, "t": None if t.value is None else float(t.value),
            "solver_warnings": [str(w.message) for w in caught]}
    if P.value is None:
        return None, info
    return (np.array(P.value), np.array(phi.value)), info


def _subgradient(inter, rho, Lf_hat, Lh, iters, restarts, seed, margin_tol):
    """Smoothed projected subgradient descent on ``lambda_max`` with ``phi3 = 1``."""
    n, m, p1, p2 = inter.dims
    N = inter.nz
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(N)
    # the LMI matrix is affine in (vech(P), phi1, phi2); tabulate the basis once
    L0 = lmi_matrix(inter, rho, np.zeros((N, N)), build_multiplier(Lf_hat, Lh, 0, 0, (m, p1, p2)))
    Z = np.zeros((2 * inter.ny, 2 * inter.ny))
    basis = []
    for i, j in zip(*iu):
        E = np.zeros((N, N))
        E[i, j] = E[j, i] = 1.0
        basis.append(lmi_matrix(inter, rho, E, Z))
    for k in (0, 1):
        ph = [0.0, 0.0]
        ph[k] = 1.0
        Xk = build_multiplier(Lf_hat, Lh, ph[0], ph[1], (m, p1, p2), phi3=0.0)
        basis.append(lmi_matrix(inter, rho, np.zeros((N, N)), Xk))
    basis = np.array(basis)
    nP = len(iu[0])
    scale = max(1.0, np.abs(L0).max())

    def unpack(v):
        P = np.zeros((N, N))
        P[iu] = v[:nP]
        return P + np.triu(P, 1).T, v[nP], v[nP + 1]

    def project(v):
        P, a, b = unpack(v)
        w, V = np.linalg.eigh(P)
        P = (V * np.maximum(w, 1e-6)) @ V.T
        out = np.empty_like(v)
        out[:nP] = P[iu]
        out[nP:] = np.maximum(v[nP:], 0.0)
        return out

    best = (math.inf, None)
    for r in range(restarts):
        X = rng.standard_normal((N, N))
        P0 = np.eye(N) + 0.1 * (X @ X.T) / N * (r > 0)
        v = np.concatenate([P0[iu], rng.uniform(0, 1, 2)])
        v = project(v)
        for k in range(iters):
            L = L0 + np.tensordot(v, basis, axes=1)
            w, V = np.linalg.eigh(L)
            if w[-1] < best[0]:
                best = (w[-1], v.copy())
                if w[-1] <= -margin_tol * scale:
                    break
            T = scale * 10.0 ** (-2 - 4 * k / max(iters - 1, 1))
            e = np.exp((w - w[-1]) / T)
            e /= e.sum()
            W = (V * e) @ V.T
            g = np.einsum("kij,ij->k", basis, W)
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            v = project(v - (0.5 / math.sqrt(k + 1)) * g / gn)
        if best[0] <= -margin_tol * scale:
            break
    P, a, b = unpack(best[1])
    return (P, np.array([a, b, 1.0])), {"status": "subgradient", "lambda_max": float(best[0])}


def lmi_feasibility(inter: Interconnection, rho: float, Lf_hat: float, Lh: float,
                    method: str = "sdp", constants: str = "distinct", margin_tol: float = 1e-9,
                    solver: str = "CLARABEL", seed: int = 0, iters: int = 4000,
                    restarts: int = 5) -> Certificate:
    """Search ``P > 0``, ``phi1, phi2 >= 0`` making :func:`lmi_matrix` negative definite.

    Parameters
    ----------
    inter : Interconnection
    rho : float
        Required decay rate, ``> 0``.
    Lf_hat, Lh : float
        Sector and Lipschitz constants of the multiplier.
    method : {"sdp", "subgradient"}
        ``"sdp"`` maximizes the eigenvalue margin with a conic solver under a
        trace normalization of ``P`` (the prox-channel weight is a free
        variable and is rescaled to 1 afterwards). ``"subgradient"`` runs a
        softmax-smoothed projected subgradient method with seeded restarts;
        it needs no conic solver but is only practical for small loops.
    constants : {"distinct", "unified"}
        ``"unified"`` uses ``max(Lf_hat, Lh)`` in both channels.
    margin_tol : float
        Required ``-lambda_max`` of the verified LMI matrix.

    Returns
    -------
    Certificate
        Always returned; solver trouble shows up as ``feasible=False`` with
        the status in ``info``. Feasibility is decided by re-checking the
        candidate in numpy, never by the solver status alone.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if constants == "unified":
        Lf_hat = Lh = max(Lf_hat, Lh)
    elif constants != "distinct":
        raise ValueError("constants must be 'distinct' or 'unified'")
    if method == "sdp":
        cand, info = _sdp(inter, rho, Lf_hat, Lh, solver)
    elif method == "subgradient":
        cand, info = _subgradient(inter, rho, Lf_hat, Lh, iters, restarts, seed, margin_tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cand is None:
        return Certificate(False, rho, math.nan, math.nan, None, math.inf, -math.inf, method, info)
    P, phi = cand
    if phi[2] <= 1e-12:
        info["note"] = "prox-channel weight vanished"
        return Certificate(False, rho, math.nan, math.nan, None, math.inf, -math.inf, method, info)
    P, phi1, phi2 = P / phi[2], float(phi[0] / phi[2]), float(phi[1] / phi[2])
    ok, margin, kappa = _verify(inter, rho, P, phi1, phi2, Lf_hat, Lh, margin_tol)
    log.info("lmi rho=%g: feasible=%s margin=%.3e kappa=%.3e (%s)", rho, ok, margin, kappa,
             info.get("status"))
    return Certificate(ok, rho, phi1, phi2, 0.5 * (P + P.T), kappa, margin, method, info)


def certify_loop(loop, rho: float, **kw) -> Certificate:
    """:func:`lmi_feasibility` for a :class:`~feedbackopt.saddleflow.ClosedLoop`."""
    return lmi_feasibility(loop.interconnection(), rho, loop.delta.lf_hat(), loop.delta.lh(), **kw)


def interconnection_transfer(inter: Interconnection, rho: float, s: complex) -> np.ndarray:
    """``C (s I - A - rho I)^-1 B``."""
    N = inter.nz
    return inter.C @ np.linalg.solve(s * np.eye(N) - inter.shifted(rho), inter.B.astype(complex))


def limit_transfer_H(maps: SteadyStateMaps, m_strong: float, mu: float, rho: float, s: complex,
                     gammaQ=None) -> np.ndarray:
    """Limit of :func:`interconnection_transfer` as the plant becomes infinitely fast.

    ``H(s) = [Pbar 0; Pi2u mu I] diag(g_m(s) I, G_mu(s)) [-Pbar' -Pi2u'/mu; 0 I]``
    with ``Pbar = [I; Pi1u]``, ``g_m(s) = 1/(s + m - rho)`` and
    ``G_mu(s) = ((s + mu - rho) I + gammaQ)^-1``.
    """
    Pi1u, Pi2u = maps.Pi1u, maps.Pi2u
    m = Pi2u.shape[1]
    p1, p2 = Pi1u.shape[0], Pi2u.shape[0]
    GQ = np.zeros((p2, p2)) if gammaQ is None else np.asarray(gammaQ, dtype=float)
    dm = s + m_strong - rho
    if dm == 0:
        raise ZeroDivisionError(f"s={s} is a pole of H")
    Gmu = np.linalg.inv((s + mu - rho) * np.eye(p2) + GQ) if p2 else np.zeros((0, 0))
    Pbar = np.vstack([np.eye(m), Pi1u])
    left = np.block([[Pbar, np.zeros((m + p1, p2))], [Pi2u, mu * np.eye(p2)]])
    mid = sla.block_diag(np.eye(m) / dm, Gmu).astype(complex)
    right = np.block([[-Pbar.T, -Pi2u.T / mu], [np.zeros((p2, m + p1)), np.eye(p2)]])
    return left @ mid @ right


def default_frequency_grid(inter: Interconnection, rho: float = 0.0, n: int = 400) -> np.ndarray:
    """``0`` plus ``n`` log-spaced points from ``1e-3 min(1, ||A||)`` to ``1e4 ||A||``."""
    a = float(np.linalg.norm(inter.shifted(rho), 2))
    return np.concatenate([[0.0], np.logspace(math.log10(1e-3 * min(1.0, a)), math.log10(1e4 * a), n)])


def fdi_sampled_check(inter: Interconnection, rho: float, Xi, grid=None,
                      tol: float = 1e-8) -> tuple[bool, float]:
    """Sampled frequency inequality ``[G; I]* Xi [G; I] <= 0``.

    Only a necessary-condition screen: it evaluates the largest eigenvalue at
    the grid points and at ``omega = inf`` (where ``G`` vanishes and the
    condition reduces to the lower-right block of ``Xi``), and cannot prove
    anything between samples.

    Returns
    -------
    ok : bool
        Worst eigenvalue ``<= tol``.
    worst : float
        Largest eigenvalue found.
    """
    Xi = np.asarray(Xi, dtype=float)
    ny = inter.ny
    grid = default_frequency_grid(inter, rho) if grid is None else np.asarray(grid, dtype=float)
    worst = float(np.linalg.eigvalsh(Xi[ny:, ny:])[-1])
    I = np.eye(ny)
    for w in grid:
        try:
            G = interconnection_transfer(inter, rho, 1j * w)
        except np.linalg.LinAlgError:
            return False, math.inf
        V = np.vstack([G, I])
        M = V.conj().T @ Xi @ V
        worst = max(worst, float(np.linalg.eigvalsh(0.5 * (M + M.conj().T))[-1]))
    return worst <= tol, worst


def _timescale_matrix(maps, m_strong, mu, rho, w, gammaQ):
    Pi1u, Pi2u = maps.Pi1u, maps.Pi2u
    m = Pi2u.shape[1]
    p2 = Pi2u.shape[0]
    mr, mur = m_strong - rho, mu - rho
    Pbar = np.vstack([np.eye(m), Pi1u])
    a = mr / (mr ** 2 + w ** 2)
    top = mu * a * Pbar @ Pbar.T + np.eye(Pbar.shape[0])
    off = a * Pbar @ Pi2u.T
    if gammaQ is None:
        gam = (w ** 2 - rho * mur) / (mur ** 2 + w ** 2) * np.eye(p2)
    else:
        K = mur * np.eye(p2) + gammaQ
        gam = np.linalg.solve(w ** 2 * np.eye(p2) + K @ K,
                              w ** 2 * np.eye(p2) + K @ (gammaQ - rho * np.eye(p2)))
        gam = 0.5 * (gam + gam.T)
    bot = (a / mu) * Pi2u @ Pi2u.T + gam
    return np.block([[top, off], [off.T, bot]])


def timescale_condition(maps: SteadyStateMaps, m_strong: float, mu: float, rho: float,
                        omega_grid=None, gammaQ=None, tol: float = 0.0) -> tuple[bool, float]:
    """Closed-form limit condition for unit multiplier weights and ``mu`` as the common constant.

    The block matrix built from ``Pbar = [I; Pi1u]`` and ``Pi2u`` must be
    positive semidefinite at every sampled frequency. With ``gammaQ`` the
    scalar ``(w^2 - rho(mu - rho)) / ((mu - rho)^2 + w^2)`` in the lower-right
    block becomes the matrix
    ``(w^2 I + K^2)^-1 (w^2 I + K (gammaQ - rho I))`` with ``K = (mu - rho) I + gammaQ``.

    Returns
    -------
    holds : bool
        Smallest eigenvalue ``> tol`` everywhere on the grid. Always false
        for ``rho >= min(m_strong, mu)``, where the reduced dynamics lose
        their decay margin.
    margin : float
        Smallest eigenvalue found (``-inf`` in the case above).
    """
    if rho >= min(m_strong, mu):
        return False, -math.inf
    if omega_grid is None:
        omega_grid = np.concatenate([[0.0], np.logspace(-4, 4, 161)])
    GQ = None if gammaQ is None else np.asarray(gammaQ, dtype=float)
    worst = math.inf
    for w in np.asarray(omega_grid, dtype=float):
        M = _timescale_matrix(maps, m_strong, mu, rho, w, GQ)
        worst = min(worst, float(np.linalg.eigvalsh(M)[0]))
    return worst > tol, worst


def _passes(res) -> bool:
    if isinstance(res, Certificate):
        return res.feasible
    if isinstance(res, tuple):
        return bool(res[0])
    return bool(res)


def find_max_rho(certifier: Callable, instance, rho_range=(1e-6, 10.0), rtol: float = 1e-4) -> float:
    """Largest rate in ``rho_range`` accepted by ``certifier(instance, rho)``.

    Geometric bisection on the pass/fail boundary, stopped at relative width
    ``rtol``. The certifier may return a bool, a ``(bool, margin)`` tuple or a
    :class:`Certificate`. Feasibility is assumed to shrink with ``rho``.

    Raises
    ------
    InfeasibleError
        If the lower end of the range already fails.
    """
    lo, hi = (float(r) for r in rho_range)
    if not 0 < lo < hi:
        raise ValueError("need 0 < rho_min < rho_max")
    if not _passes(certifier(instance, lo)):
        raise InfeasibleError(f"no certificate at rho={lo:g}")
    if _passes(certifier(instance, hi)):
        return hi
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if _passes(certifier(instance, mid)):
            lo = mid
        else:
            hi = mid
    return lo
