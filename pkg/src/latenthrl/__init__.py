"""Hierarchical meta-RL toolkit for tabular MDPs with latent exit structure."""

__version__ = "0.1.0"
