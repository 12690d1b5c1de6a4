"""LQELab: localization quality estimation from edge-distribution statistics."""

__version__ = "0.1.0"
