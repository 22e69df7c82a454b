"""Spectral shape descriptors, SPD pooling and metric learning for 3D retrieval."""

__version__ = "0.1.0"
