"""Ordinal risk grading with a denoising autoencoder and a CORAL head."""

__version__ = "0.1.0"
