"""Convex multistage dynamic programming with certified inexact cuts."""

__version__ = "0.1.0"
