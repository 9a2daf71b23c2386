"""Uncertainty quantification for autoencoder-based Koopman surrogates."""

__version__ = "0.1.0"
