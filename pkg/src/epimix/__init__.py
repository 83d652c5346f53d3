"""Bayesian link-mixture models for area-level count time series."""

__version__ = "0.1.0"
