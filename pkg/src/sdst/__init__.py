"""Sparse-dense side-tuner for video temporal grounding, desk scale."""

__version__ = "0.1.0"
