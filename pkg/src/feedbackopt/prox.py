"""Proximal operators, Moreau envelopes and the loop nonlinearity.

Supported function classes (``f`` on the input, ``h`` on the first output
group, ``g`` on the second):

* :class:`Quadratic` -- ``0.5 x'Hx + c'x``
* :class:`BoxIndicator` -- indicator of ``[lo, hi]`` (bounds may be infinite)
* :class:`ZeroSetIndicator` -- indicator of ``{0}``
* :class:`SoftBoxPenalty` -- ``(eta/2) ||s(x)||^2`` with ``s`` the soft threshold
* :class:`Composite` -- block-separable stack of the above
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "CapabilityError",
    "ScheduleError",
    "Quadratic",
    "BoxIndicator",
    "ZeroSetIndicator",
    "SoftBoxPenalty",
    "Composite",
    "Event",
    "DeltaMap",
    "prox",
    "moreau_grad",
    "moreau_envelope_value",
    "soft_threshold",
    "delta_eval",
    "spec_from_dict",
]


class CapabilityError(TypeError):
    """The requested operation is not available for this function class."""


class ScheduleError(ValueError):
    """A time-varying parameter schedule is not defined at the requested time."""


def soft_threshold(lo, hi, v) -> np.ndarray:
    """Distance-to-box map: ``v - lo`` below, ``0`` inside, ``v - hi`` above.

    Infinite bounds are inactive.
    """
    lo, hi, v = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), np.asarray(v, dtype=float)
    if lo.shape != v.shape or hi.shape != v.shape:
        raise ValueError(f"dimension mismatch: lo{lo.shape}, hi{hi.shape}, v{v.shape}")
    with np.errstate(invalid="ignore"):
        return np.minimum(v - lo, 0.0) + np.maximum(v - hi, 0.0)


def _vec(v, dim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.shape != (dim,):
        raise ValueError(f"expected vector of length {dim}, got shape {v.shape}")
    return v


class _Spec:
    """Common interface; subclasses override what they support."""

    dim: int
    kind: str = ""
    smooth = False

    def value(self, x) -> float:
        raise NotImplementedError

    def prox(self, v, mu: float) -> np.ndarray:
        raise CapabilityError(f"{self.kind} has no prox implementation")

    def prox_jacobian(self, v, mu: float) -> np.ndarray:
        raise CapabilityError(f"{self.kind} has no prox implementation")

    def grad(self, x) -> np.ndarray:
        raise CapabilityError(f"{self.kind} is not differentiable")

    def hessian(self, x) -> np.ndarray:
        raise CapabilityError(f"{self.kind} is not differentiable")

    def strong_convexity(self) -> float:
        return 0.0

    def lipschitz(self) -> float:
        raise CapabilityError(f"{self.kind} has no Lipschitz gradient")

    @property
    def separable(self) -> bool:
        return True

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class Quadratic(_Spec):
    """``x -> 0.5 x'Hx + c'x`` with ``H`` symmetric positive semidefinite."""

    H: np.ndarray
    c: np.ndarray
    kind = "quadratic"
    smooth = True

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if H.shape != (c.size, c.size):
            raise ValueError(f"H{H.shape} does not match c({c.size})")
        if not np.allclose(H, H.T, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("H must be symmetric")
        H = 0.5 * (H + H.T)
        if np.linalg.eigvalsh(H).min() < -1e-12:
            raise ValueError("H must be positive semidefinite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.c.size

    def value(self, x) -> float:
        x = _vec(x, self.dim)
        return float(0.5 * x @ self.H @ x + self.c @ x)

    def grad(self, x) -> np.ndarray:
        return self.H @ x + self.c

    def hessian(self, x) -> np.ndarray:
        return self.H

    def prox(self, v, mu: float) -> np.ndarray:
        v = _vec(v, self.dim)
        return np.linalg.solve(np.eye(self.dim) + mu * self.H, v - mu * self.c)

    def prox_jacobian(self, v, mu: float) -> np.ndarray:
        return np.linalg.inv(np.eye(self.dim) + mu * self.H)

    def strong_convexity(self) -> float:
        return float(np.linalg.eigvalsh(self.H).min())

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.H).max())

    @property
    def separable(self) -> bool:
        return bool(np.count_nonzero(self.H - np.diag(np.diag(self.H))) == 0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "H": self.H.tolist(), "c": self.c.tolist()}


def _bounds(lo, hi):
    lo = np.asarray(lo, dtype=float).reshape(-1)
    hi = np.asarray(hi, dtype=float).reshape(-1)
    if lo.shape != hi.shape:
        raise ValueError("lo and hi must have the same length")
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise ValueError("bounds must not be NaN")
    if np.any(lo > hi):
        raise ValueError("box bounds must satisfy lo <= hi")
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def _bound_to_json(b: np.ndarray) -> list:
    return [x if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in b.tolist()]


@dataclass(frozen=True, eq=False)
class BoxIndicator(_Spec):
    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def __post_init__(self):
        lo, hi = _bounds(self.lo, self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def value(self, x) -> float:
        x = _vec(x, self.dim)
        return 0.0 if np.all((x >= self.lo) & (x <= self.hi)) else np.inf

    def prox(self, v, mu: float) -> np.ndarray:
        return np.clip(_vec(v, self.dim), self.lo, self.hi)

    def prox_jacobian(self, v, mu: float) -> np.ndarray:
        v = _vec(v, self.dim)
        return np.diag(((v > self.lo) & (v < self.hi)).astype(float))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": _bound_to_json(self.lo), "hi": _bound_to_json(self.hi)}


@dataclass(frozen=True, eq=False)
class ZeroSetIndicator(_Spec):
    dim: int
    kind = "zero"

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("dim must be positive")

    def value(self, x) -> float:
        return 0.0 if not np.any(_vec(x, self.dim)) else np.inf

    def prox(self, v, mu: float) -> np.ndarray:
        _vec(v, self.dim)
        return np.zeros(self.dim)

    def prox_jacobian(self, v, mu: float) -> np.ndarray:
        return np.zeros((self.dim, self.dim))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": int(self.dim)}


@dataclass(frozen=True, eq=False)
class SoftBoxPenalty(_Spec):
    """Quadratic exterior penalty ``(eta/2) ||s_{lo,hi}(x)||^2``; gradient ``eta*s``."""

    eta: float
    lo: np.ndarray
    hi: np.ndarray
    kind = "softbox"
    smooth = True

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        lo, hi = _bounds(self.lo, self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "eta", float(self.eta))

    @property
    def dim(self) -> int:
        return self.lo.size

    def value(self, x) -> float:
        s = soft_threshold(self.lo, self.hi, _vec(x, self.dim))
        return 0.5 * self.eta * float(s @ s)

    def grad(self, x) -> np.ndarray:
        return self.eta * soft_threshold(self.lo, self.hi, x)

    def hessian(self, x) -> np.ndarray:
        x = _vec(x, self.dim)
        return np.diag(self.eta * ((x < self.lo) | (x > self.hi)).astype(float))

    def lipschitz(self) -> float:
        return self.eta

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eta": self.eta,
                "lo": _bound_to_json(self.lo), "hi": _bound_to_json(self.hi)}


@dataclass(frozen=True, eq=False)
class Composite(_Spec):
    """Separable sum over consecutive index blocks."""

    parts: tuple
    kind = "composite"

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise ValueError("composite needs at least one block")
        object.__setattr__(self, "parts", parts)
        edges = np.cumsum([0] + [p.dim for p in parts])
        object.__setattr__(self, "_slices", tuple(slice(a, b) for a, b in zip(edges[:-1], edges[1:])))

    @property
    def dim(self) -> int:
        return int(sum(p.dim for p in self.parts))

    @property
    def smooth(self) -> bool:
        return all(p.smooth for p in self.parts)

    @property
    def separable(self) -> bool:
        return all(p.separable for p in self.parts)

    def _map(self, method, v, *args):
        v = _vec(v, self.dim)
        return np.concatenate([getattr(p, method)(v[s], *args) for p, s in zip(self.parts, self._slices)])

    def _blockdiag(self, method, v, *args):
        v = _vec(v, self.dim)
        out = np.zeros((self.dim, self.dim))
        for p, s in zip(self.parts, self._slices):
            out[s, s] = getattr(p, method)(v[s], *args)
        return out

    def value(self, x) -> float:
        x = _vec(x, self.dim)
        return float(sum(p.value(x[s]) for p, s in zip(self.parts, self._slices)))

    def prox(self, v, mu):
        return self._map("prox", v, mu)

    def prox_jacobian(self, v, mu):
        return self._blockdiag("prox_jacobian", v, mu)

    def grad(self, x):
        return self._map("grad", x)

    def hessian(self, x):
        return self._blockdiag("hessian", x)

    def strong_convexity(self) -> float:
        return min(p.strong_convexity() for p in self.parts)

    def lipschitz(self) -> float:
        return max(p.lipschitz() for p in self.parts)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


def _bound_from_json(b) -> np.ndarray:
    return np.array([float(x) for x in b], dtype=float)


def spec_from_dict(d: dict) -> _Spec:
    kind = d["kind"]
    if kind == "quadratic":
        return Quadratic(np.asarray(d["H"], dtype=float), np.asarray(d["c"], dtype=float))
    if kind == "box":
        return BoxIndicator(_bound_from_json(d["lo"]), _bound_from_json(d["hi"]))
    if kind == "zero":
        return ZeroSetIndicator(int(d["dim"]))
    if kind == "softbox":
        return SoftBoxPenalty(float(d["eta"]), _bound_from_json(d["lo"]), _bound_from_json(d["hi"]))
    if kind == "composite":
        return Composite(tuple(spec_from_dict(p) for p in d["parts"]))
    raise ValueError(f"unknown function kind {kind!r}")


def prox(spec: _Spec, v, mu: float) -> np.ndarray:
    """``argmin_x spec(x) + ||x - v||^2 / (2 mu)``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    return spec.prox(_vec(v, spec.dim), mu)


def moreau_grad(spec: _Spec, v, mu: float) -> np.ndarray:
    """Gradient of the Moreau envelope, ``(v - prox(v)) / mu``."""
    v = _vec(v, spec.dim)
    return (v - prox(spec, v, mu)) / mu


def moreau_envelope_value(spec: _Spec, v, mu: float) -> float:
    v = _vec(v, spec.dim)
    p = prox(spec, v, mu)
    return spec.value(p) + float((p - v) @ (p - v)) / (2.0 * mu)


@dataclass(frozen=True)
class Event:
    """Right-continuous parameter change: from time ``t`` on, use these specs."""

    t: float
    f: Optional[_Spec] = None
    h: Optional[_Spec] = None
    g: Optional[_Spec] = None

    def to_dict(self) -> dict:
        ov = {k: getattr(self, k).to_dict() for k in ("f", "h", "g") if getattr(self, k) is not None}
        return {"t": self.t, "overrides": ov}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        ov = d.get("overrides", {})
        return cls(float(d["t"]), **{k: spec_from_dict(v) for k, v in ov.items()})


@dataclass(frozen=True)
class DeltaMap:
    """The loop nonlinearity ``Delta(y) = (grad f(y1) - m y1, grad h(y2), mu grad M_g(y3))``.

    ``h`` may be ``None`` (no smooth output penalty). The schedule is a
    sorted sequence of :class:`Event` applied cumulatively for ``t >= 0``.
    """

    f: _Spec
    h: Optional[_Spec]
    g: _Spec
    mu: float
    schedule: tuple = field(default=())

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.f.smooth:
            raise CapabilityError("f must be differentiable")
        if self.h is not None and not self.h.smooth:
            raise CapabilityError("h must be differentiable")
        sched = tuple(sorted(self.schedule, key=lambda e: e.t))
        if sched and sched[0].t < 0:
            raise ScheduleError("events must occur at t >= 0")
        object.__setattr__(self, "schedule", sched)
        states = [(self.f, self.h, self.g)]
        for ev in sched:
            f, h, g = states[-1]
            nxt = (ev.f or f, ev.h or h, ev.g or g)
            for new, old, name in zip(nxt, (f, h, g), "fhg"):
                if old is not None and new is not None and new.dim != old.dim:
                    raise ValueError(f"event at t={ev.t} changes the dimension of {name}")
            states.append(nxt)
        object.__setattr__(self, "_states", tuple(states))
        object.__setattr__(self, "_times", tuple(e.t for e in sched))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.f.dim, (0 if self.h is None else self.h.dim), self.g.dim

    def specs_at(self, t: float):
        if not t >= 0:
            raise ScheduleError(f"schedule undefined at t={t}")
        return self._states[bisect.bisect_right(self._times, t)]

    def with_schedule(self, schedule: Sequence[Event]) -> "DeltaMap":
        return DeltaMap(self.f, self.h, self.g, self.mu, tuple(schedule))

    def m_strong(self) -> float:
        return min(s[0].strong_convexity() for s in self._states)

    def lf_hat(self) -> float:
        """Largest ``L_f - m`` over the schedule (with the schedule-wide ``m``)."""
        return max(s[0].lipschitz() for s in self._states) - self.m_strong()

    def lh(self) -> float:
        if self.h is None:
            return 0.0
        return max(s[1].lipschitz() for s in self._states)

    def to_dict(self) -> dict:
        return {"f": self.f.to_dict(), "h": None if self.h is None else self.h.to_dict(),
                "g": self.g.to_dict(), "mu": self.mu,
                "schedule": [e.to_dict() for e in self.schedule]}

    @classmethod
    def from_dict(cls, d: dict) -> "DeltaMap":
        h = d.get("h")
        return cls(spec_from_dict(d["f"]), None if h is None else spec_from_dict(h),
                   spec_from_dict(d["g"]), float(d["mu"]),
                   tuple(Event.from_dict(e) for e in d.get("schedule", [])))


def delta_eval(dmap: DeltaMap, y, t: float, m_strong: Optional[float] = None) -> np.ndarray:
    """Evaluate the stacked nonlinearity at ``y = (y1, y2, y3)`` and time ``t``.

    ``m_strong`` defaults to the schedule-wide strong-convexity modulus of ``f``.
    """
    m, p1, p2 = dmap.dims
    y = _vec(y, m + p1 + p2)
    f, h, g = dmap.specs_at(t)
    mm = dmap.m_strong() if m_strong is None else m_strong
    y1, y2, y3 = y[:m], y[m:m + p1], y[m + p1:]
    parts = [f.grad(y1) - mm * y1]
    if p1:
        parts.append(h.grad(y2))
    parts.append(dmap.mu * moreau_grad(g, y3, dmap.mu))
    return np.concatenate(parts)
