"""Siamese text encoders, graph-embedding baselines and their ensemble for knowledge graph completion."""

__version__ = "0.1.0"
