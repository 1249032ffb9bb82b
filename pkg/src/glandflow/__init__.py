"""Gland-level prostate histology workflow: segment glands, detect cancer, grade."""

__version__ = "0.1.0"
