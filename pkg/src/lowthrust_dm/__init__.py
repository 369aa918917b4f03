"""Indirect low-thrust trajectory generation with conditional diffusion models."""

__version__ = "0.1.0"
