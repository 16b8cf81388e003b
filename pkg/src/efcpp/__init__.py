"""Exemplar-free class-incremental learning with Empirical Feature Matrix regularisation."""

__version__ = "0.1.0"
