"""Marker-based heritability, G-BLUP and association scans for replicated genotypes."""

__version__ = "0.1.0"
