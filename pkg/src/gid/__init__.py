"""Generalized intent discovery with meta-knowledge-enriched dual classifiers."""

__version__ = "0.1.0"
