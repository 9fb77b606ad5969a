"""Desk-scale siamese transformer relevance ranking.

Train a query-doc cross-encoder teacher and a siamese student with a
learned interaction module, precompute and quantize document embeddings,
feed the neural score into a gradient-boosted-trees second stage, and
evaluate with P@10/DCG against random, oracle and BM25 baselines.
"""

__version__ = "0.1.0"
