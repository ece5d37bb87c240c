"""Latent-vector imputation with a label-conditional multi-modal prior."""

__version__ = "0.1.0"
