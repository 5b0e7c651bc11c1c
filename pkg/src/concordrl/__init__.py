"""Consensus-augmented cooperative multi-agent reinforcement learning.

The package builds a discrete "consensus" signal from each agent's local
observations via teacher/student self-distillation, fuses consensus drawn
from several observation windows with multi-head attention, and feeds the
fused vector to an actor-critic trainer alongside the raw observations.
Everything runs on a small reverse-mode autodiff engine over float64
numpy arrays, so runs are deterministic and desk-scale.
"""

__version__ = "0.1.0"
