"""Latent-memory GUI agent: frozen toy policy plus trainable trajectory
compressor, dual-scale memory weaving, two-stage training and a synthetic
GUI world for end-to-end evaluation."""

__version__ = "0.1.0"
