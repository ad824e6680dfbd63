"""Multimodal (text + OCR + image) antisemitism detection and categorization."""

__version__ = "0.1.0"
