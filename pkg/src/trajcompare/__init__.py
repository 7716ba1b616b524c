"""Toolkit for comparing microscopic driving behavior between trajectory datasets."""

__version__ = "0.1.0"
