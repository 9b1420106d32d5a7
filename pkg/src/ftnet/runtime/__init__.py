"""Distributed runtime: neuron and coordinator state machines and their transports.

The simulator pulls in the numba-compiled RNG, so it is imported lazily;
socket-mode node processes only need the state machines and the codec.
"""

from .actors import Coordinator, NeuronNode, Timing, compute_neuron, subscribers
from .trace import RecoveryRecord, Trace, TraceEvent, measure_recovery

_LAZY = {"ClusterConfig", "SimResult", "Simulation", "run_simulation"}


def __getattr__(name):
    if name in _LAZY:
        from . import sim

        return getattr(sim, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "ClusterConfig", "Coordinator", "NeuronNode", "RecoveryRecord", "SimResult", "Simulation", "Timing",
    "Trace", "TraceEvent", "compute_neuron", "measure_recovery", "run_simulation", "subscribers",
]
