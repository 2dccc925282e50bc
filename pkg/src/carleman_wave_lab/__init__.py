"""Numerical laboratory for Carleman estimates of stochastic wave equations."""

__version__ = "0.1.0"
