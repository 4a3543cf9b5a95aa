"""Desk-scale deraining transformer on a minimal differentiable tensor engine."""

__version__ = "0.1.0"
