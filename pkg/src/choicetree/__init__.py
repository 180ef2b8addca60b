"""Bayesian model trees for discrete choice."""

__version__ = "0.1.0"
