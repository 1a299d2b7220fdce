"""Multicomponent 2D Toda hierarchy: factorization, dressing, Whitham limits."""

__version__ = "0.1.0"
