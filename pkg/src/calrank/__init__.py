"""Self-calibrated listwise reranking at desk scale."""

__version__ = "0.1.0"
