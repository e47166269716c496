"""Debiasing weights for samples drawn from several biased sources."""

__version__ = "0.1.0"
