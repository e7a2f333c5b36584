"""Dynamical low-rank training: splitting integrators, rank-adaptive
truncation, and a small feed-forward network harness."""

__version__ = "0.1.0"
