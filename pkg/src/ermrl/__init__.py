"""Hierarchical multi-agent RL for emergency responder stationing.

A continuous-time dispatch simulator, region-decomposed DDPG agents with
combinatorial action discretization, search and facility-location baselines,
and an experiment harness with paired statistical tests.
"""

__version__ = "0.1.0"
