"""Relational symbol learning for pick-and-place effect prediction."""

__version__ = "0.1.0"
