"""Capacitance matrices of periodic, truncated, and defected resonator lattices."""

__version__ = "0.1.0"
