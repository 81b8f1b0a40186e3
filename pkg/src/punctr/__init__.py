"""Punctuation restoration via encoder transfer and an adversarial POS auxiliary task."""

__version__ = "0.1.0"
