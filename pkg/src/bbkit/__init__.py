"""Measure, attribute and simulate scan-triggered blowback traffic."""

__version__ = "0.1.0"
