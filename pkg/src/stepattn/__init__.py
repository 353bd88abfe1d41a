"""Imputation of missing hourly step counts with multi-timescale sparse self-attention."""

__version__ = "0.1.0"
