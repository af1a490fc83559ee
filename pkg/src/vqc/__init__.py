"""Learned RIS / BS codebooks for active-sensing localization (VQ-C)."""

__version__ = "0.1.0"
