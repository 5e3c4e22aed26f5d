"""Learned correspondence weighting for point-to-plane 2-D/3-D rigid registration."""

__version__ = "0.1.0"
