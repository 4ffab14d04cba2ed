"""Offline policy selection with Batch Value-Function Tournament (BVFT) in tabular MDPs."""

__version__ = "0.1.0"
