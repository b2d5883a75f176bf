"""Memory-efficient streaming embeddings with shared per-cluster bases."""

__version__ = "0.1.0"
