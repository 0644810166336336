"""Multi-view contrastive embeddings and online multi-object tracking, in numpy."""

__version__ = "0.1.0"
