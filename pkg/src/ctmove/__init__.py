"""Continuous-time multistate movement model with MCMC path reconstruction."""

__version__ = "0.1.0"
