"""Partial insurance of income shocks: estimation and simulation toolkit."""

__version__ = "0.1.0"
