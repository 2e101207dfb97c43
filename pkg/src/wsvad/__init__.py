"""Weakly supervised video anomaly scoring on precomputed snippet features."""

__version__ = "0.1.0"
