"""Copula-aligned multi-relational graph attention with episodic meta-training."""

__version__ = "0.1.0"
