"""Dual stochastic MPC with information probing and a stability drift constraint."""

__version__ = "0.1.0"
