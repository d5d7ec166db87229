"""Frozen-backbone transformer laboratory for general time series analysis."""

__version__ = "0.1.0"
