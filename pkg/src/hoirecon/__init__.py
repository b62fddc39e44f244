"""Desk-scale hand-held object reconstruction toolkit."""

__version__ = "0.1.0"
