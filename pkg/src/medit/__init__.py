"""Backdoor injection into a toy transformer by batch weight editing."""

__version__ = "0.1.0"
