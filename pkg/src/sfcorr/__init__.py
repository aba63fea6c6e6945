"""Semantic-aware fine-grained correspondence: dense self-supervised encoders and video label propagation."""

__version__ = "0.1.0"
