"""Exact and Monte Carlo signal correlators for continuously monitored
finite-dimensional open quantum systems."""

__version__ = "0.1.0"
