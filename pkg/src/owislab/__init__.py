"""Desk-scale lab for consistency-regularized open-world instance segmentation."""

__version__ = "0.1.0"
