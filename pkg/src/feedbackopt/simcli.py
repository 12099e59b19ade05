"""Command-line front end.

Subcommands::

    feedbackopt run       simulate a case, optionally certify, write CSV and JSON
    feedbackopt certify   LMI certificate (optionally the largest certified rate)
    feedbackopt compare   compare two run summaries
    feedbackopt case-info describe a builtin or JSON case

Exit codes: 0 success, 2 invalid configuration, 3 divergence, 4 certification
failure (``--require-cert`` or ``certify``). Failures print a JSON object
``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .certify import InfeasibleError, certify_loop, find_max_rho
from .lti import StateSpace
from .powergrid import ieee9_case, load_case, reduce, build_swing, GridCase
from .prox import BoxIndicator, Composite, DeltaMap, Quadratic, SoftBoxPenalty, ZeroSetIndicator
from .saddleflow import (ClosedLoop, DivergenceError, Disturbance, Segment, integrate,
                         integrate_open_loop)

log = logging.getLogger(__name__)

EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNCERTIFIED = 2, 3, 4
MODES = ("none", "soft", "approximate")


class CliError(Exception):
    def __init__(self, msg, code=EXIT_CONFIG, kind="invalid_config"):
        super().__init__(msg)
        self.code = code
        self.kind = kind


class ToyCase:
    """Scalar plant ``x' = -x + u + w`` with the state measured twice.

    The first copy plays the role of a line flow (box ``[-1, 1]``), the second
    one of a frequency that must vanish. In approximate mode both are hard
    constraints on a single input, so the hard-output map is rank deficient.
    """

    name = "toy-scalar"
    n_line = 1
    defaults = {"mu": 1.0, "eta": 1.0, "gamma": 0.1, "epsilon": 1.0, "dt": 1e-2, "t_end": 30.0}

    def __init__(self):
        self.disturbance = Disturbance((Segment(0.0, [0.5]),
                                        Segment(10.0, [0.5], amplitude=[0.2], omega=0.5)))
        self.limit_events = ()
        self.lo, self.hi = np.array([-1.0]), np.array([1.0])
        self.C = np.array([[1.0], [1.0]])

    def plant(self, split: str = "soft") -> StateSpace:
        A, B, Bw = [[-1.0]], [[1.0]], [[1.0]]
        if split == "soft":
            return StateSpace.build(A, B, Bw, C1=self.C[:1], C2=self.C[1:])
        return StateSpace.build(A, B, Bw, C1=np.zeros((0, 1)), C2=self.C)

    def loop(self, mode, mu=1.0, eta=None, gamma=None, epsilon=1.0) -> ClosedLoop:
        f = Quadratic(np.eye(1), np.zeros(1))
        if mode == "soft":
            return ClosedLoop(self.plant("soft"), DeltaMap(f, SoftBoxPenalty(eta, self.lo, self.hi),
                                                           ZeroSetIndicator(1), mu), None, epsilon)
        g = Composite((BoxIndicator(self.lo, self.hi), ZeroSetIndicator(1)))
        return ClosedLoop(self.plant("hard"), DeltaMap(f, None, g, mu),
                          gamma * np.diag([1.0, 0.0]), epsilon)

    def limits_at(self, t):
        return self.lo, self.hi

    def flows_and_frequency(self, x):
        y = np.atleast_2d(x) @ self.C.T
        return y[:, :1], y[:, 1]

    equilibrium = GridCase.equilibrium
    scenario = GridCase.scenario


def get_case(name: str):
    if name == "ieee9":
        return ieee9_case()
    if name == "toy-scalar":
        return ToyCase()
    try:
        grid, doc = load_case(name)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load case {name!r}: {exc}")
    w0 = np.asarray(doc.get("nominal_load", np.zeros(len(grid.load_buses))), dtype=float)
    events = tuple(tuple(e) for e in doc.get("limit_events", ()))
    return GridCase(grid, reduce(build_swing(grid)), Disturbance.constant(w0), events,
                    {"mu": 4.0, "eta": 4.0, "gamma": 1e-2, "epsilon": 1e-2, "dt": 1e-3, "t_end": 20.0})


@dataclass
class RunConfig:
    case: str = "ieee9"
    mode: str = "approximate"
    eta: Optional[float] = None
    mu: Optional[float] = None
    gamma: Optional[float] = None
    epsilon: Optional[float] = None
    certify: bool = False
    rho: float = 1e-3
    bisect: bool = False
    require_cert: bool = False
    method: str = "sdp"
    seed: int = 0
    t_end: Optional[float] = None
    dt: Optional[float] = None
    oracle: bool = False
    oracle_stride: int = 10
    csv: Optional[str] = None
    summary: Optional[str] = None
    cert: Optional[str] = None

    def validate(self):
        if self.mode not in MODES:
            raise CliError(f"mode must be one of {MODES}")
        for k in ("eta", "mu", "gamma", "epsilon", "t_end", "dt"):
            v = getattr(self, k)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise CliError(f"{k} must be a nonnegative finite number")
        for k in ("mu", "epsilon", "dt", "rho"):
            v = getattr(self, k)
            if v is not None and v <= 0:
                raise CliError(f"{k} must be positive")
        if self.oracle_stride < 1:
            raise CliError("oracle_stride must be >= 1")
        if self.method not in ("sdp", "subgradient"):
            raise CliError("method must be 'sdp' or 'subgradient'")
        if self.require_cert and self.mode == "none":
            raise CliError("--require-cert needs a controller (mode soft or approximate)")

    def resolved(self, case) -> "RunConfig":
        d = asdict(self)
        for k, v in case.defaults.items():
            if d.get(k) is None:
                d[k] = v
        return RunConfig(**d)


def _controller_kw(cfg: RunConfig) -> dict:
    kw = {"mu": cfg.mu, "epsilon": cfg.epsilon}
    if cfg.mode == "soft":
        kw["eta"] = cfg.eta
    else:
        kw["gamma"] = cfg.gamma
    return kw


def build_loop(case, cfg: RunConfig) -> ClosedLoop:
    mode = "soft" if cfg.mode == "none" else cfg.mode
    c = RunConfig(**{**asdict(cfg), "mode": mode})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return case.loop(mode, **_controller_kw(c))


def certify(case, cfg: RunConfig) -> dict:
    loop = build_loop(case, cfg)
    kw = {"method": cfg.method, "seed": cfg.seed}
    cert = certify_loop(loop, cfg.rho, **kw)
    out = cert.to_dict()
    if cfg.bisect:
        try:
            out["rho_max"] = find_max_rho(lambda lp, r: certify_loop(lp, r, **kw), loop,
                                          (cfg.rho, 10.0), rtol=1e-3)
        except InfeasibleError:
            out["rho_max"] = None
    return out


def _metrics(case, lg, loop) -> tuple[float, float]:
    flows, freq = case.flows_and_frequency(lg.x)
    viol = np.zeros(len(lg.times))
    for k, t in enumerate(lg.times):
        lo, hi = case.limits_at(t)
        viol[k] = np.maximum.reduce([flows[k] - hi, lo - flows[k], np.zeros_like(hi)]).sum()
    integral = float(trapezoid(viol, lg.times)) if len(lg.times) > 1 else 0.0
    return integral, float(np.max(np.abs(freq)))


def run(cfg: RunConfig) -> tuple[int, dict]:
    """Simulate according to ``cfg``; returns ``(exit_code, summary)`` and writes artifacts."""
    cfg.validate()
    case = get_case(cfg.case)
    cfg = cfg.resolved(case)
    summary = {"case": case.name, "mode": cfg.mode, "t_end": cfg.t_end, "dt": cfg.dt,
               "final_err": None, "max_freq_dev": None, "line_violation_integral": None,
               "certified": None, "rho": None, "kappaP": None}
    loop = build_loop(case, cfg)
    code = 0
    if cfg.certify or cfg.require_cert:
        cert = certify(case, cfg)
        summary.update(certified=cert["feasible"], rho=cert["rho"], kappaP=cert["kappaP"])
        if cert.get("rho_max") is not None:
            summary["rho_max"] = cert["rho_max"]
        if cfg.cert:
            with open(cfg.cert, "w") as fh:
                json.dump(cert, fh, indent=1)
        if cfg.require_cert and not cert["feasible"]:
            raise CliError(f"no certificate at rho={cfg.rho:g} for {case.name}/{cfg.mode}",
                           EXIT_UNCERTIFIED, "certification_failed")
    scen = case.scenario(loop, cfg.t_end, cfg.dt)
    try:
        if cfg.mode == "none":
            n, m = loop.sys.n, loop.sys.m
            lg = integrate_open_loop(loop.sys, scen.z0[n:n + m], scen, loop.epsilon)
        else:
            lg = integrate(loop, scen, with_oracle=cfg.oracle, oracle_stride=cfg.oracle_stride)
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_DIVERGED, "divergence")
    if cfg.mode != "none":
        zs = case.equilibrium(loop, lg.times[-1])
        summary["final_err"] = float(np.linalg.norm(lg.z[-1] - zs))
    summary["line_violation_integral"], summary["max_freq_dev"] = _metrics(case, lg, loop)
    if cfg.csv:
        lg.to_csv(cfg.csv)
    if cfg.summary:
        with open(cfg.summary, "w") as fh:
            json.dump(summary, fh, indent=1)
    return code, summary


def compare(a: dict, b: dict, rtol: float = 1e-9) -> dict:
    """Which of two run summaries has the smaller line violation and frequency excursion."""
    if a.get("case") != b.get("case"):
        raise CliError(f"summaries are from different cases ({a.get('case')} vs {b.get('case')})")
    if (a.get("t_end"), a.get("dt")) != (b.get("t_end"), b.get("dt")):
        raise CliError("summaries use different horizons or step sizes")
    out = {"case": a["case"], "a": a.get("mode"), "b": b.get("mode")}
    for key in ("line_violation_integral", "max_freq_dev"):
        va, vb = a[key], b[key]
        if abs(va - vb) <= rtol * max(abs(va), abs(vb), 1e-300) or va == vb:
            win = "tie"
        else:
            win = "a" if va < vb else "b"
        out[key] = {"a": va, "b": vb, "winner": win}
    return out


def case_info(name: str) -> dict:
    case = get_case(name)
    info = {"case": case.name, "defaults": case.defaults}
    plant = case.plant()
    info.update(states=plant.n, inputs=plant.m, disturbances=plant.q, lines=case.n_line)
    if isinstance(case, GridCase):
        g = case.grid
        info.update(buses=g.n_bus, unreduced_states=2 * g.n_bus,
                    gen_buses=[i + 1 for i in g.gen_buses], load_buses=[i + 1 for i in g.load_buses],
                    line_limits=[[float(a), float(b)] for a, b in zip(g.p_min, g.p_max)],
                    limit_events=[list(e) for e in case.limit_events])
    loop = build_loop(case, RunConfig(case=name, mode="approximate").resolved(case))
    P = loop.maps.Pi2u @ loop.maps.Pi2u.T
    info["hard_output_gram_rank"] = int(np.linalg.matrix_rank(P))
    info["hard_outputs"] = P.shape[0]
    info["regularization_ok"] = loop.regularization_ok()
    info["plant_abscissa"] = float(np.linalg.eigvals(plant.A).real.max())
    return info


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feedbackopt", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def controller(sp):
        sp.add_argument("--config", help="JSON file with run options (CLI flags win)")
        sp.add_argument("--case")
        sp.add_argument("--mode", choices=MODES)
        for k in ("eta", "mu", "gamma"):
            sp.add_argument(f"--{k}", type=float)
        sp.add_argument("--eps", "--epsilon", dest="epsilon", type=float)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--bisect", action="store_true", default=None)
        sp.add_argument("--method", choices=("sdp", "subgradient"))
        sp.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="simulate a case")
    controller(r)
    r.add_argument("--certify", action="store_true", default=None)
    r.add_argument("--require-cert", dest="require_cert", action="store_true", default=None)
    r.add_argument("--t-end", dest="t_end", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--oracle", action="store_true", default=None)
    r.add_argument("--oracle-stride", dest="oracle_stride", type=int)
    r.add_argument("--csv")
    r.add_argument("--summary")
    r.add_argument("--cert")

    c = sub.add_parser("certify", help="LMI certificate for a controller")
    controller(c)
    c.add_argument("--out")

    cp_ = sub.add_parser("compare", help="compare two run summaries")
    cp_.add_argument("a")
    cp_.add_argument("b")

    ci = sub.add_parser("case-info", help="describe a case")
    ci.add_argument("case")
    return p


def _config(ns) -> RunConfig:
    d = {}
    if getattr(ns, "config", None):
        try:
            with open(ns.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {ns.config}: {exc}")
        d = {k.replace("-", "_"): v for k, v in d.items()}
        if "eps" in d:
            d["epsilon"] = d.pop("eps")
        known = {f.name for f in fields(RunConfig)}
        bad = set(d) - known
        if bad:
            raise CliError(f"unknown config keys: {sorted(bad)}")
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None:
            d[f.name] = v
    try:
        return RunConfig(**d)
    except TypeError as exc:
        raise CliError(str(exc))


def _emit(obj):
    print(json.dumps(obj, indent=1, default=float))


def main(argv=None) -> int:
    try:
        ns = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.cmd == "run":
            code, summary = run(_config(ns))
            _emit(summary)
            return code
        if ns.cmd == "certify":
            cfg = _config(ns)
            if cfg.mode == "none":
                raise CliError("certify needs mode soft or approximate")
            cfg.validate()
            case = get_case(cfg.case)
            cert = certify(case, cfg.resolved(case))
            if ns.out:
                with open(ns.out, "w") as fh:
                    json.dump(cert, fh, indent=1)
            _emit({k: v for k, v in cert.items() if k != "P"})
            return 0 if cert["feasible"] else EXIT_UNCERTIFIED
        if ns.cmd == "compare":
            docs = []
            for path in (ns.a, ns.b):
                try:
                    with open(path) as fh:
                        docs.append(json.load(fh))
                except (OSError, json.JSONDecodeError) as exc:
                    raise CliError(f"cannot read summary {path}: {exc}")
            _emit(compare(*docs))
            return 0
        if ns.cmd == "case-info":
            _emit(case_info(ns.case))
            return 0
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc), "exit_code": exc.code}),
              file=sys.stderr)
        return exc.code
    return EXIT_CONFIG
