"""Fake distances, p-Green kernels and the p -> 1 inverse mean curvature flow."""

__version__ = "0.1.0"
