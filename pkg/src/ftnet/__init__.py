"""Fault-tolerant neural inference distributed one neuron per node."""

from .nn import REFERENCE_SPEC, NetworkSpec, Parameters, forward, predict

__version__ = "0.1.0"

__all__ = ["NetworkSpec", "Parameters", "REFERENCE_SPEC", "forward", "predict", "__version__"]
