"""Multivariate two-level linear mixed models for plausible-value assessment data."""

__version__ = "0.1.0"
