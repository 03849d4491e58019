"""Pseudo-label curation and evaluation for monocular depth and surface normals."""

__version__ = "0.1.0"
