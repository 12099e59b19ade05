"""Dense state-space utilities for stable LTI plants.

Covers the plant model ``x' = Ax + Bu + Bw w``, ``y_i = C_i x + D_iw w``,
its transfer functions and steady-state gains, and the block matrices of
the plant-plus-saddle-flow interconnection used by :mod:`feedbackopt.certify`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

__all__ = [
    "StateSpace",
    "SteadyStateMaps",
    "Interconnection",
    "hurwitz_check",
    "transfer_eval",
    "steady_state_maps",
    "assemble_interconnection",
]

COND_WARN = 1e12


def _as_matrix(M, rows: Optional[int] = None, cols: Optional[int] = None,
               name: str = "matrix") -> np.ndarray:
    M = np.array(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {M.shape[1]}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    M.setflags(write=False)
    return M


def _lu_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lu, piv = sla.lu_factor(M, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() == 0.0:
        raise np.linalg.LinAlgError("singular matrix")
    cond = np.linalg.cond(M)
    if cond > COND_WARN:
        warnings.warn(f"ill-conditioned solve (cond={cond:.2e})", RuntimeWarning,
                      stacklevel=3)
    return sla.lu_solve((lu, piv), rhs, check_finite=False)


def hurwitz_check(A) -> tuple[bool, float]:
    """Return ``(is_hurwitz, spectral_abscissa)`` of a square matrix.

    The test is strict: an eigenvalue on the imaginary axis is not Hurwitz.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("A has non-finite entries")
    abscissa = float(np.max(sla.eigvals(A).real))
    return abscissa < 0.0, abscissa


@dataclass(frozen=True)
class StateSpace:
    """Stable LTI plant without control feedthrough.

    Outputs ``y1`` feed the smooth penalty ``h`` and ``y2`` the nonsmooth
    term ``g``; either may be empty (zero rows).
    """

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D1w: np.ndarray
    D2w: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, name="A")
        n = A.shape[0]
        if n == 0 or A.shape[1] != n:
            raise ValueError(f"A must be square with n >= 1, got shape {A.shape}")
        B = _as_matrix(self.B, rows=n, name="B")
        Bw = _as_matrix(self.Bw, rows=n, name="Bw")
        C1 = _as_matrix(np.reshape(self.C1, (-1, n)), cols=n, name="C1")
        C2 = _as_matrix(np.reshape(self.C2, (-1, n)), cols=n, name="C2")
        q = Bw.shape[1]
        D1w = _as_matrix(np.reshape(self.D1w, (C1.shape[0], q)), name="D1w")
        D2w = _as_matrix(np.reshape(self.D2w, (C2.shape[0], q)), name="D2w")
        ok, abscissa = hurwitz_check(A)
        if not ok:
            raise ValueError(f"A is not Hurwitz (spectral abscissa {abscissa:.3g})")
        for name, val in dict(A=A, B=B, Bw=Bw, C1=C1, C2=C2, D1w=D1w, D2w=D2w).items():
            object.__setattr__(self, name, val)

    @classmethod
    def build(cls, A, B, Bw=None, C1=None, C2=None, D1w=None, D2w=None) -> "StateSpace":
        """Convenience constructor filling omitted blocks with empty/zero matrices."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        Bw = np.zeros((n, 1)) if Bw is None else np.asarray(Bw, dtype=float).reshape(n, -1)
        q = Bw.shape[1]
        C1 = np.zeros((0, n)) if C1 is None else np.asarray(C1, dtype=float).reshape(-1, n)
        C2 = np.zeros((0, n)) if C2 is None else np.asarray(C2, dtype=float).reshape(-1, n)
        D1w = np.zeros((C1.shape[0], q)) if D1w is None else D1w
        D2w = np.zeros((C2.shape[0], q)) if D2w is None else D2w
        return cls(A, np.asarray(B, dtype=float).reshape(n, -1), Bw, C1, C2, D1w, D2w)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.Bw.shape[1]

    @property
    def p1(self) -> int:
        return self.C1.shape[0]

    @property
    def p2(self) -> int:
        return self.C2.shape[0]

    def outputs(self, x, w) -> tuple[np.ndarray, np.ndarray]:
        return self.C1 @ x + self.D1w @ w, self.C2 @ x + self.D2w @ w

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("A", "B", "Bw", "C1", "C2", "D1w", "D2w")}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpace":
        A = np.asarray(d["A"], dtype=float)
        n = A.shape[0]
        Bw = np.asarray(d.get("Bw", np.zeros((n, 1))), dtype=float).reshape(n, -1)
        q = Bw.shape[1]

        def outmat(key):
            return np.asarray(d.get(key, []), dtype=float).reshape(-1, n)

        C1, C2 = outmat("C1"), outmat("C2")
        D1w = np.asarray(d.get("D1w", np.zeros((C1.shape[0], q))), dtype=float)
        D2w = np.asarray(d.get("D2w", np.zeros((C2.shape[0], q))), dtype=float)
        return cls(A, np.asarray(d["B"], dtype=float).reshape(n, -1), Bw, C1, C2,
                   D1w.reshape(C1.shape[0], q), D2w.reshape(C2.shape[0], q))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "StateSpace":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SteadyStateMaps:
    """DC gains from ``u`` and ``w`` to the two output groups."""

    Pi1u: np.ndarray
    Pi2u: np.ndarray
    Pi1w: np.ndarray
    Pi2w: np.ndarray

    def outputs(self, u, w) -> tuple[np.ndarray, np.ndarray]:
        return self.Pi1u @ u + self.Pi1w @ w, self.Pi2u @ u + self.Pi2w @ w


def transfer_eval(sys: StateSpace, which: str, s: complex) -> np.ndarray:
    """Evaluate ``G_which(s)`` for ``which`` in ``{"1u", "2u", "1w", "2w"}``.

    Raises ``np.linalg.LinAlgError`` when ``s`` is an eigenvalue of ``A``.
    """
    if which not in ("1u", "2u", "1w", "2w"):
        raise ValueError(f"unknown channel {which!r}")
    C = sys.C1 if which[0] == "1" else sys.C2
    Bin = sys.B if which[1] == "u" else sys.Bw
    M = s * np.eye(sys.n) - sys.A
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(M.astype(complex), check_finite=False)
    except (ValueError, sla.LinAlgError) as exc:
        raise np.linalg.LinAlgError(f"sI - A singular at s={s}") from exc
    if np.abs(np.diag(lu)).min() <= 1e-14 * max(1.0, np.abs(M).max()):
        raise np.linalg.LinAlgError(f"sI - A singular at s={s}")
    G = C @ sla.lu_solve((lu, piv), Bin.astype(complex), check_finite=False)
    if which[1] == "w":
        G = G + (sys.D1w if which[0] == "1" else sys.D2w)
    return G


def steady_state_maps(sys: StateSpace) -> SteadyStateMaps:
    """Compute ``Pi_iu = -C_i A^-1 B`` and ``Pi_iw = -C_i A^-1 Bw + D_iw``."""
    X = _lu_solve(sys.A, np.hstack([sys.B, sys.Bw]))
    XB, XW = X[:, : sys.m], X[:, sys.m:]
    maps = SteadyStateMaps(
        Pi1u=-sys.C1 @ XB,
        Pi2u=-sys.C2 @ XB,
        Pi1w=-sys.C1 @ XW + sys.D1w,
        Pi2w=-sys.C2 @ XW + sys.D2w,
    )
    for M in (maps.Pi1u, maps.Pi2u, maps.Pi1w, maps.Pi2w):
        M.setflags(write=False)
    return maps


@dataclass(frozen=True)
class Interconnection:
    """Bold matrices of the loop ``z' = A z + B Delta(C z + Dw w) + Bw w``.

    The state is ``z = (x, u, lambda)`` and the nonlinearity input stacks
    ``(u, y1, y2 + mu*lambda)``.
    """

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    Dw: np.ndarray
    m_strong: float
    mu: float
    gammaQ: np.ndarray
    epsilon: float
    dims: tuple  # (n, m, p1, p2)

    @property
    def nz(self) -> int:
        return self.A.shape[0]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    def shifted(self, rho: float) -> np.ndarray:
        return self.A + rho * np.eye(self.nz)


def assemble_interconnection(sys: StateSpace, m_strong: float, mu: float,
                             gammaQ=None, epsilon: Optional[float] = None,
                             maps: Optional[SteadyStateMaps] = None) -> Interconnection:
    """Build the interconnection matrices for the plant and saddle-flow controller.

    Parameters
    ----------
    sys : StateSpace
    m_strong : float
        Strong-convexity modulus of the input cost.
    mu : float
        Proximal parameter.
    gammaQ : array_like, optional
        Dual regularization ``gamma*Q`` (p2 x p2, PSD). Adds ``-gammaQ`` to
        the multiplier block of ``A``.
    epsilon : float, optional
        Time-scale parameter. The plant rows (``A``, ``B`` and ``Bw``) are
        divided by ``epsilon``, i.e. the plant runs ``1/epsilon`` times faster
        than the controller.
    maps : SteadyStateMaps, optional
        Precomputed steady-state maps of ``sys``.
    """
    if not m_strong > 0:
        raise ValueError("m_strong must be positive")
    if not mu > 0:
        raise ValueError("mu must be positive")
    eps = 1.0 if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    maps = steady_state_maps(sys) if maps is None else maps
    n, m, p1, p2 = sys.n, sys.m, sys.p1, sys.p2
    if gammaQ is None:
        GQ = np.zeros((p2, p2))
    else:
        GQ = np.asarray(gammaQ, dtype=float).reshape(p2, p2)
        if not np.allclose(GQ, GQ.T, atol=1e-12):
            raise ValueError("gammaQ must be symmetric")
        if p2 and np.linalg.eigvalsh(GQ).min() < -1e-12:
            raise ValueError("gammaQ must be positive semidefinite")
    nz, ny = n + m + p2, m + p1 + p2
    iu, il = slice(n, n + m), slice(n + m, nz)

    A = np.zeros((nz, nz))
    A[:n, :n] = sys.A / eps
    A[:n, iu] = sys.B / eps
    A[iu, iu] = -m_strong * np.eye(m)
    A[il, il] = -mu * np.eye(p2) - GQ

    B = np.zeros((nz, ny))
    B[iu, :m] = -np.eye(m)
    B[iu, m:m + p1] = -maps.Pi1u.T
    B[iu, m + p1:] = -maps.Pi2u.T / mu
    B[il, m + p1:] = np.eye(p2)

    Bw = np.zeros((nz, sys.q))
    Bw[:n] = sys.Bw / eps

    C = np.zeros((ny, nz))
    C[:m, iu] = np.eye(m)
    C[m:m + p1, :n] = sys.C1
    C[m + p1:, :n] = sys.C2
    C[m + p1:, il] = mu * np.eye(p2)

    Dw = np.vstack([np.zeros((m, sys.q)), sys.D1w, sys.D2w])
    return Interconnection(A, B, Bw, C, Dw, float(m_strong), float(mu), GQ, eps,
                           (n, m, p1, p2))
