"""Blind face restoration with a learned dictionary prior and cross-attention fusion."""

__version__ = "0.1.0"
