"""Preprocessing and evaluation toolkit for neuritic-plaque segmentation."""

__version__ = "0.1.0"
