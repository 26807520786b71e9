"""Windowed Malliavin calculus on a discretized Wiener space."""

__version__ = "0.1.0"
