"""Bundled synthetic dataset with planted cluster structure.

Items are split evenly into C clusters. Every user follows a Markov walk
over clusters (advance to the next cluster with high probability, stay
put sometimes, occasionally jump anywhere) and picks a uniform item from
the current cluster, so the next item is predictable at the cluster level
but not the item level.

Token embeddings encode the cluster: each item's matrix holds three
"boilerplate" tokens shared by every item (large folded-gaussian entries
with tiny per-item jitter), a few content tokens near the item's cluster
centroid, and a final token very close to the centroid. Mean pooling
keeps the centroid signal; max pooling is dominated coordinate-wise by
the shared boilerplate tokens and collapses items onto nearly one point,
which is what makes it the worst strategy here. A second token file
carries the EOL-prompt variant (last token = exact centroid, provenance
flag set).

Everything is generated from one seed; re-running with the same seed
produces byte-identical files.
"""

from __future__ import annotations

import os

import numpy as np

from . import catalog as cat
from . import embedding_io as eio

N_TEMPLATE_TOKENS = 3


def _sequences(rng, n_users, n_clusters, members, advance=0.85, stay=0.10):
    """Markov cluster walks; returns list of per-user item-id lists."""
    users = []
    for _ in range(n_users):
        length = int(rng.integers(10, 29))
        c = int(rng.integers(n_clusters))
        items = []
        for _ in range(length):
            r = rng.random()
            if r < advance:
                c = (c + 1) % n_clusters
            elif r >= advance + stay:
                c = int(rng.integers(n_clusters))
            pool = members[c]
            items.append(int(pool[rng.integers(len(pool))]))
        users.append(items)
    return users


def generate(out_dir, n_items: int = 500, n_users: int = 2000,
             n_clusters: int = 20, dim: int = 128, seed: int = 7) -> dict:
    """Write the synthetic corpus and a ready-to-run base config.

    Files: catalog.tsv, interactions.tsv, tokens.rxeb, tokens_eol.rxeb,
    keyword.tsv, summary.tsv, expansion.tsv, base.cfg.

    Returns a name -> path dict for the written files.
    """
    if n_items % n_clusters != 0:
        raise ValueError(f"n_items={n_items} must be divisible by n_clusters={n_clusters}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    clusters = [(i - 1) % n_clusters for i in range(1, n_items + 1)]
    members = [[i for i in range(1, n_items + 1) if clusters[i - 1] == c]
               for c in range(n_clusters)]
    centroids = rng.normal(0.0, 1.0, size=(n_clusters, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    template = np.abs(rng.normal(0.0, 1.0, size=(N_TEMPLATE_TOKENS, dim)))

    matrices = []
    eol_matrices = []
    for i in range(1, n_items + 1):
        c = clusters[i - 1]
        total = int(rng.integers(4, 12))
        n_content = total - N_TEMPLATE_TOKENS - 1
        rows = [template + 0.01 * rng.normal(size=template.shape)]
        if n_content:
            rows.append(centroids[c] + 0.08 * rng.normal(size=(n_content, dim)))
        rows.append(centroids[c] + 0.05 * rng.normal(size=(1, dim)))
        m = np.concatenate(rows).astype(np.float32)
        matrices.append(m)
        m_eol = m.copy()
        m_eol[-1] = centroids[c].astype(np.float32)
        eol_matrices.append(m_eol)

    paths = {name: os.path.join(out_dir, fname) for name, fname in [
        ("catalog", "catalog.tsv"), ("interactions", "interactions.tsv"),
        ("tokens", "tokens.rxeb"), ("tokens_eol", "tokens_eol.rxeb"),
        ("keyword", "keyword.tsv"), ("summary", "summary.tsv"),
        ("expansion", "expansion.tsv"), ("config", "base.cfg")]}

    lines = []
    for i in range(1, n_items + 1):
        c = clusters[i - 1]
        maker = (i * 7) % 13
        lines.append(f"{i}\ttitle=Item {i:04d}\tcategory=Cluster {c:02d}"
                     f"\tbrand=Maker {maker}")
    _write_text(paths["catalog"], "\n".join(lines) + "\n")

    users = _sequences(rng, n_users, n_clusters, members)
    lines = []
    for uid, items in enumerate(users, start=1):
        for t, item in enumerate(items):
            lines.append(f"{uid}\t{item}\t{t}")
    _write_text(paths["interactions"], "\n".join(lines) + "\n")

    eio.write_token_embeddings(
        eio.TokenEmbeddingStore(dim=dim, matrices=matrices, eol=False),
        paths["tokens"])
    eio.write_token_embeddings(
        eio.TokenEmbeddingStore(dim=dim, matrices=eol_matrices, eol=True),
        paths["tokens_eol"])

    for kind in ("keyword", "summary", "expansion"):
        lines = []
        for i in range(1, n_items + 1):
            c = clusters[i - 1]
            if kind == "keyword":
                text = f"cluster-{c:02d} item-{i:04d}"
            elif kind == "summary":
                text = f"Item {i:04d} belongs to cluster {c:02d}."
            else:
                text = (f"Item {i:04d} is one of the products in cluster "
                        f"{c:02d}, typically consumed right after cluster "
                        f"{(c - 1) % n_clusters:02d} items.")
            lines.append(f"{i}\t{text}")
        _write_text(paths[kind], "\n".join(lines) + "\n")

    _write_text(paths["config"], _base_config_text())
    return paths


def _base_config_text() -> str:
    return """\
[data]
catalog = catalog.tsv
interactions = interactions.tsv
min_length = 5
text_source = sac
keyword_file = keyword.tsv
summary_file = summary.tsv
expansion_file = expansion.tsv

[embedding]
tokens = tokens.rxeb
tokens_eol = tokens_eol.rxeb
pooling = mean

[adapter]
architecture = linear
use_pca = false

[fusion]
strategy = replace

[sasrec]
max_len = 32
d = 64
epochs = 50
patience = 10

[run]
seeds = 42,43,44
"""


def _write_text(path, text):
    from .checkpoint import atomic_write
    atomic_write(path, text.encode("utf-8"))


def load_base_config(out_dir):
    from .config import RunConfig
    return RunConfig.load(os.path.join(out_dir, "base.cfg"))
