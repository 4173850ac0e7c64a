"""Hint-based training of non-autoregressive translation students."""

__version__ = "0.1.0"
