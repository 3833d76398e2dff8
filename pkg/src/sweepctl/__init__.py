"""Sweeping-process simulation, discrete optimal control, and certification."""

__version__ = "0.1.0"
