"""Mutual-information-promoting conditional VAE for sequence-to-sequence translation."""

__version__ = "0.1.0"
