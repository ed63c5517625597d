"""Harm-controlling set-valued predictors for expert decision support."""

__version__ = "0.1.0"
