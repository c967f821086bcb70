"""Lossless LiDAR reflectance codec built on scan-order serialization and a
selective state-space entropy model."""

__version__ = "0.1.0"
