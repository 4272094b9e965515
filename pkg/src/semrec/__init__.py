"""Semantic-embedding sequential recommendation toolkit.

Pipeline pieces: item catalog ingestion and prompt rendering, token-level
embedding files and pooling, feature adapters (PCA / linear / MLP / PQ /
MoE), fusion with ID embeddings, a SASRec backbone trained on a small
reverse-mode autodiff engine, and the sampled-negative HR/NDCG evaluation
protocol, orchestrated by a cached experiment runner.
"""

__version__ = "0.1.0"
