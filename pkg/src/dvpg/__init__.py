"""Deterministic value-gradient policy search: estimators, models and theory checks."""

__version__ = "0.1.0"
