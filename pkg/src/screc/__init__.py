"""Scalable cross-entropy training toolkit for next-item prediction."""

__version__ = "0.1.0"
