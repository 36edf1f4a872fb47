"""Manifold-restricted noise correlation: learning rules, estimators, and validation tools."""

__version__ = "0.1.0"
