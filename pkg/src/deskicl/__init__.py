"""Desk-scale in-context imitation learning with visual trace prediction."""

__version__ = "0.1.0"
