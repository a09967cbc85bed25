"""Relink: reason-and-construct evidence graphs for multi-hop QA.

The pipeline combines a high-precision explicit knowledge graph with a
high-recall pool of PMI-filtered latent relations, explores both with a
query-driven coarse-to-fine beam search, instantiates missing links on
demand, and generates answers grounded in per-triple source sentences.
"""

__version__ = "0.1.0"
