"""Causal effect estimation for immune receptor sequences from repertoire-level outcomes."""

__version__ = "0.1.0"
