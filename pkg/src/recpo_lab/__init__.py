"""Adaptive-margin preference optimisation for sequential recommendation, at desk scale."""

__version__ = "0.1.0"
