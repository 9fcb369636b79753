"""Latent physiological state discovery from multivariate biomarker panels."""

__version__ = "0.1.0"
