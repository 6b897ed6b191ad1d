"""Data-driven stochastic optimal and stabilizing control via transfer operators."""

__version__ = "0.1.0"
