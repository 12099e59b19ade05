"""How slowing the optimizer down buys a certificate.

A lightly damped plant with a strong input gain is too fast a target for the
saddle flow at epsilon = 1, but the closed-form limit condition says a
positive rate exists once the plant is fast enough relative to the controller.
"""
import numpy as np

from feedbackopt import ClosedLoop, DeltaMap, Quadratic, StateSpace, ZeroSetIndicator, certify_loop
from feedbackopt.certify import InfeasibleError, find_max_rho, timescale_condition

A = np.array([[0.0, 1.0], [-4.0, -0.4]])
plant = StateSpace.build(A, [[0.0], [6.0]], [[0.0], [1.0]], C2=[[1.0, 0.0]])
delta = DeltaMap(Quadratic([[1.0]], [0.0]), None, ZeroSetIndicator(1), mu=1.0)
loop = ClosedLoop(plant, delta)

ok, margin = timescale_condition(loop.maps, delta.m_strong(), delta.mu, 0.0)
print(f"limit condition at rho=0: {ok} (margin {margin:.3f})")

for eps in (1.0, 0.3, 0.1, 0.03, 0.01):
    lp = loop.with_epsilon(eps)
    try:
        r = find_max_rho(lambda l, rho: certify_loop(l, rho), lp, (1e-5, 1.0), rtol=1e-2)
        print(f"epsilon={eps:<5}  largest certified rate {r:.4f}")
    except InfeasibleError:
        print(f"epsilon={eps:<5}  no certificate")
