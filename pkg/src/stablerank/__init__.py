"""stablerank: order-robust listwise reranking with a small NumPy transformer."""

__version__ = "0.1.0"
