"""Desk-scale laboratory for counting with small transformers."""

__version__ = "0.1.0"
