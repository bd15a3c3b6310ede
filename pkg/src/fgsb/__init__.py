"""Guided Schrödinger-bridge translation between paired 2D MRI slices."""

__version__ = "0.1.0"
