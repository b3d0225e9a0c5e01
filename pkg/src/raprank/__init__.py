"""Reconstruction attacks on aggregate statistics with frequency-ranked candidate rows."""

__version__ = "0.1.0"
