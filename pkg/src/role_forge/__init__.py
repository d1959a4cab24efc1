"""Emergent roles for cooperative multi-agent Q-learning on toy Dec-POMDPs."""

__version__ = "0.1.0"
