"""Conditional multi-adversarial autoencoder with ordinal regression for face aging."""

__version__ = "0.1.0"
