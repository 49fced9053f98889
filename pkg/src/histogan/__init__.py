"""Similarity-guided GAN training and evaluation for histopathology-style
patch synthesis."""

__version__ = "0.1.0"
