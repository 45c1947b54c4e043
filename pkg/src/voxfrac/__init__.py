"""Voxel-based crack propagation with finite cells, eigenerosion and switched elements."""

__version__ = "0.1.0"
