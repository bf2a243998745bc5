"""Hierarchical expert reasoning for medical visual question answering."""

__version__ = "0.1.0"
