"""Gradient-based edge attribution for transformer circuit discovery."""

__version__ = "0.1.0"
