"""Constrained multi-user multi-server fair queuing: scheduler, fluid oracle and simulator."""
from .model import INFINITE, ConfigError, EligibilityMatrix, Packet, SystemState
from .fluid import Cluster, Foc, compute_foc, fair_rates, verify_cm4_fairness, witness_allocation
from .scheduler import DispatchRecord, Scheduler, Variant, default_delta
from .sim import LengthLaw, Scenario, SourceKind, Trace, TrafficSource, fluid_approx, run

__all__ = [
    "INFINITE", "ConfigError", "EligibilityMatrix", "Packet", "SystemState",
    "Cluster", "Foc", "compute_foc", "fair_rates", "verify_cm4_fairness", "witness_allocation",
    "DispatchRecord", "Scheduler", "Variant", "default_delta",
    "LengthLaw", "Scenario", "SourceKind", "Trace", "TrafficSource", "fluid_approx", "run",
]
