"""Phoneme-conditioned singing voice separation."""

__version__ = "0.1.0"
