"""Operator-learning surrogate engine for unsteady stormwater treatment dynamics."""

__version__ = "0.1.0"
