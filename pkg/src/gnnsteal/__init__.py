"""Extracting inductive GNN victims into surrogates through query responses."""

__version__ = "0.1.0"
