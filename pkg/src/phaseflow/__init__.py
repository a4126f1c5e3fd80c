"""Behavior-prototype retrieval, phase-conditioned action priors, and a
flow-matching policy on a synthetic planar manipulation bench."""

__version__ = "0.1.0"
