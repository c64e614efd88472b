"""Multivariate longitudinal latent-class Gaussian process models."""
__version__ = "0.1.0"
