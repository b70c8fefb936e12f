"""Adaptive-granularity quantile forecasting toolkit."""

__version__ = "0.1.0"
