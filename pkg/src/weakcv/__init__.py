"""Regression-based control variates for weak discretisation schemes of SDEs."""

__version__ = "0.1.0"
