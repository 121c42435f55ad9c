"""Spatial-filtering Bayesian model averaging."""

__version__ = "0.1.0"
