"""Cooperative aerial payload transport: dynamics, control, and learning lab."""

__version__ = "0.1.0"
