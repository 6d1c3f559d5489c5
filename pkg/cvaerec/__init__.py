"""Conditioned variational autoencoder for constrained top-N recommendation."""

__version__ = "1.0.0"
