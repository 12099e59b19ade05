"""Online feedback optimization with proximal saddle flows.

Modules
-------
lti        state-space plants, steady-state maps, interconnection matrices
prox       proximable costs and the loop nonlinearity
saddleflow closed-loop simulation
certify    LMI and frequency-domain stability certificates
oracle     frozen-time reference solver
powergrid  swing-equation grids and DC-OPF controllers
simcli     command-line interface
"""

from .lti import StateSpace, SteadyStateMaps, assemble_interconnection, steady_state_maps
from .prox import (BoxIndicator, Composite, DeltaMap, Event, Quadratic, SoftBoxPenalty,
                   ZeroSetIndicator)
from .saddleflow import ClosedLoop, Disturbance, Scenario, Segment, integrate
from .certify import Certificate, certify_loop, lmi_feasibility
from .oracle import solve_frozen

__all__ = [
    "StateSpace", "SteadyStateMaps", "assemble_interconnection", "steady_state_maps",
    "BoxIndicator", "Composite", "DeltaMap", "Event", "Quadratic", "SoftBoxPenalty",
    "ZeroSetIndicator", "ClosedLoop", "Disturbance", "Scenario", "Segment", "integrate",
    "Certificate", "certify_loop", "lmi_feasibility", "solve_frozen",
]

__version__ = "0.1.0"
