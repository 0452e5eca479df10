"""Confounder-dependent Bayesian mixture model for heterogeneous treatment effects."""

__version__ = "0.1.0"
