"""IEEE 9-bus grid under three controllers (about a minute and a half).

The line 1 limit drops to 0.5 p.u. on [10, 20) s and the load at bus 5
starts swinging at 50 s.
"""
import numpy as np

from feedbackopt import certify_loop
from feedbackopt.powergrid import ieee9_case
from feedbackopt.saddleflow import integrate, integrate_open_loop

case = ieee9_case()
loops = {"soft": case.loop("soft", mu=4.0, eta=4.0), "approximate": case.loop("approximate", mu=4.0, gamma=1e-2)}
for name, loop in loops.items():
    c = certify_loop(loop, 1e-3)
    print(f"{name:12s} certified at rho=1e-3: {c.feasible} (kappa {c.kappaP:.0f})")

logs = {}
for name, loop in loops.items():
    logs[name] = integrate(loop, case.scenario(loop, 100.0, 1e-3))
ref = loops["soft"]
sc = case.scenario(ref, 100.0, 1e-3)
logs["none"] = integrate_open_loop(ref.sys, sc.z0[ref.sys.n:ref.sys.n + ref.sys.m], sc, ref.epsilon)

print("\n             line 1 @19.9s   |freq| @19.9s   |freq| @49.9s   max |freq| t>60")
for name in ("none", "soft", "approximate"):
    lg = logs[name]
    flows, freq = case.flows_and_frequency(lg.x)
    i, j = int(19.9 / 1e-3), int(49.9 / 1e-3)
    tail = np.abs(freq[lg.times > 60]).max()
    print(f"{name:12s} {flows[i, 0]:12.4f} {abs(freq[i]):15.2e} {abs(freq[j]):15.2e} {tail:15.2e}")
