"""Certify a one-state loop, then watch it track a moving optimum.

Run with ``python3 demos/scalar_loop.py``.
"""
import numpy as np

from feedbackopt import ClosedLoop, DeltaMap, Disturbance, Quadratic, Scenario, Segment, StateSpace
from feedbackopt import ZeroSetIndicator, certify_loop, integrate
from feedbackopt.certify import find_max_rho

# x' = -x + u + w, and we want y = x to sit at zero with the cheapest input
plant = StateSpace.build([[-1.0]], [[1.0]], [[1.0]], C2=[[1.0]])
loop = ClosedLoop(plant, DeltaMap(Quadratic(np.eye(1), np.zeros(1)), None, ZeroSetIndicator(1), mu=1.0))

rho_max = find_max_rho(lambda lp, r: certify_loop(lp, r), loop, (1e-4, 2.0), rtol=1e-3)
cert = certify_loop(loop, 0.9 * rho_max)
print(f"largest certified rate {rho_max:.4f}; at 90% of it kappa(P) = {cert.kappaP:.1f}")

# constant load first, then a slow oscillation
w = Disturbance((Segment(0.0, [0.5]), Segment(20.0, [0.5], amplitude=[0.3], omega=0.4)))
log = integrate(loop, Scenario(60.0, 1e-2, w, [1.0, -1.0, 0.5]), with_oracle=True)

for t in (0, 5, 10, 19.99, 30, 45, 60):
    k = int(round(t / 1e-2))
    print(f"t={log.times[k]:6.2f}  x={log.x[k, 0]:+.4f}  u={log.u[k, 0]:+.4f}  |z - z*|={log.err[k]:.2e}")
