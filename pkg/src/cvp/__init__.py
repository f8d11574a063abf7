"""Causal variational principles on finite weighted point clouds."""
__version__ = "0.1.0"
