"""Outdoor instruction-following navigation on street graphs.

Environment state machine, panorama feature abstraction, a from-scratch
tensor/autodiff engine, the attention seq2seq navigation agent, trajectory
metrics, synthetic world generation, and the experiment harness.
"""

__version__ = "0.1.0"
