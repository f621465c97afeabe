"""Desk-scale simulator of federated cross-modal retrieval.

Implements modality-aware client training, a learnable aggregation router,
minimax-fair weight fusion, and router-guided adapter personalization on
top of a small reverse-mode differentiation engine. Everything is seeded
and bit-reproducible.
"""

__version__ = "0.1.0"
