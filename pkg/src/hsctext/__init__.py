"""Histograms of sparse codes for character detection and lexicon-based word recognition."""

__version__ = "0.1.0"
