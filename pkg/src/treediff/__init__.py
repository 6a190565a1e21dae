"""Bi-level tree-guided diffusion planning over exact score models."""

__version__ = "0.1.0"
