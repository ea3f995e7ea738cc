"""Noise-robust training of small neural networks for compute-in-memory hardware.

Trains multi-exit networks with a negative-feedback loss under injected
weight noise and evaluates robustness by Monte Carlo noisy inference over a
bit-sliced device-conductance model.
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
