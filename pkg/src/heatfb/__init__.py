"""Numerical laboratory for the penalised heat-insulation free-boundary problem."""

__version__ = "0.1.0"
