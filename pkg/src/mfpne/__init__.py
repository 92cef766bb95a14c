"""Budgeted multi-fidelity Bayesian optimization for approximate pure Nash equilibria."""

__version__ = "0.1.0"
