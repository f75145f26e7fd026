"""Decentralized flocking controllers learned from a centralized expert.

Modules: ``gsp`` (graph filters), ``arch`` (GF/GCNN/GRNN), ``backprop``
(exact gradients), ``train`` (imitation learning), ``flocking`` (simulator
and expert), ``harness`` (datasets, sweeps, transfer) and ``cli``.
"""

__version__ = "0.1.0"
