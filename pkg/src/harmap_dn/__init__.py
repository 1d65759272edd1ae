"""Harmonic maps, their Dirichlet-to-Neumann data, and recovery of target-metric jets."""

__version__ = "0.1.0"

from .dnmap import DNOracle, dn_evaluate, dn_from_energy, dn_mixed_derivative
from .forward import ForwardProblem, NewtonControls, solve
from .geometry import ConformalTestCase, MetricField, TargetMetric
from .grid import GridDomain
from .identities import verify_alessandrini, verify_nth_identity, verify_third_identity
from .linearize import SlotSpec, build_table

__all__ = ["ConformalTestCase", "DNOracle", "ForwardProblem", "GridDomain", "MetricField",
           "NewtonControls", "SlotSpec", "TargetMetric", "build_table", "dn_evaluate",
           "dn_from_energy", "dn_mixed_derivative", "solve",
           "verify_alessandrini", "verify_nth_identity", "verify_third_identity"]
