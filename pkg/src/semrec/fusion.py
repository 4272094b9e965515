"""Fusing adapted semantic embeddings with trainable ID embeddings.

Three strategies. `replace` feeds the adapter output straight into the
recommender with no ID table at all. `concat` joins each adapted row with
a trainable ID row (both dim d) and projects 2d -> d; pretrained ID values
serve as initialization and keep training. `align` feeds the adapter
output like replace but anchors it to a frozen pretrained ID table via an
auxiliary mean-squared-error term.

Every strategy is exposed as a "source": the object the sequence model
queries for its item-representation table. A source's `forward()` builds
the (N+1) x d table on the active tape, with row 0 (padding) structurally
zero, and returns an optional auxiliary loss term alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .adapters import AdapterPipeline

STRATEGIES = ("replace", "concat", "align")
ID_TABLE_ENTRY = "id.table"


@dataclass
class FusionSpec:
    strategy: str
    align_weight: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}; "
                             f"expected one of {STRATEGIES}")
        if self.align_weight < 0:
            raise ValueError(f"align_weight must be non-negative, got {self.align_weight}")
        if self.align_weight > 0 and self.strategy != "align":
            raise ValueError(f"align_weight > 0 only applies to the align strategy, "
                             f"not {self.strategy!r}")

    @property
    def needs_pretrained_ids(self) -> bool:
        return self.strategy == "align"


def init_id_table(n_items: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh (N+1) x d ID table: uniform(-1/sqrt(d), 1/sqrt(d)) rows with the
    padding row zeroed."""
    bound = 1.0 / np.sqrt(d)
    table = rng.uniform(-bound, bound, size=(n_items + 1, d)).astype(np.float32)
    table[0] = 0.0
    return table


def validate_id_table(table: np.ndarray, n_items: int, d: int):
    if table.shape != (n_items + 1, d):
        raise ValueError(f"ID table shape {table.shape} does not match "
                         f"(N+1, d) = ({n_items + 1}, {d})")
    if np.any(table[0] != 0):
        raise ValueError("ID table padding row (row 0) must be zero")


def load_pretrained_ids(path, n_items: int, d: int) -> np.ndarray:
    entries = ckpt.load_checkpoint(path)
    if ID_TABLE_ENTRY not in entries:
        raise ValueError(f"checkpoint {path} has no {ID_TABLE_ENTRY!r} entry")
    table = entries[ID_TABLE_ENTRY]
    validate_id_table(table, n_items, d)
    return table


def alignment_loss(semantic: ad.Tensor, id_rows: np.ndarray) -> ad.Tensor:
    """Mean squared error between the adapted table and the ID rows for real
    items (padding row excluded): sum of squared differences / (N * d)."""
    if semantic.shape != id_rows.shape:
        raise ad.ShapeError(f"alignment_loss: semantic {semantic.shape} vs "
                            f"id rows {id_rows.shape}")
    diff = ad.sub(semantic, ad.Tensor(id_rows))
    return ad.reduce_mean(ad.mul(diff, diff))


def _with_padding_row(real_rows: ad.Tensor) -> ad.Tensor:
    zero = ad.Tensor(np.zeros((1, real_rows.shape[-1]), dtype=np.float32))
    return ad.concat([zero, real_rows], axis=0)


class IdOnlySource:
    """Plain trainable ID embeddings, no semantic input. Used to pretrain
    the ID table consumed by concat/align."""

    def __init__(self, n_items: int, d: int, rng: np.random.Generator,
                 table: np.ndarray | None = None, name: str = ID_TABLE_ENTRY):
        if table is None:
            table = init_id_table(n_items, d, rng)
        validate_id_table(table, n_items, d)
        self.n_items = n_items
        self.out_dim = d
        self.table = ad.Parameter(table.copy(), name)

    def forward(self):
        real = ad.narrow(self.table, 0, 1, self.n_items + 1)
        return _with_padding_row(real), None

    def params(self):
        return [self.table]

    def frozen_entries(self):
        return {}


class ReplaceSource:
    """Adapter output is the item representation; no ID parameters exist."""

    def __init__(self, pipeline: AdapterPipeline):
        self.pipeline = pipeline
        self.n_items = pipeline.base.shape[0]
        self.out_dim = pipeline.out_dim

    def forward(self):
        return _with_padding_row(self.pipeline.adapted_table()), None

    def params(self):
        return self.pipeline.params()

    def frozen_entries(self):
        return self.pipeline.frozen_entries()


class ConcatSource:
    """Adapter output concatenated with a trainable ID row, projected back
    to d. The ID table keeps training; pretrained values only initialize it."""

    def __init__(self, pipeline: AdapterPipeline, rng: np.random.Generator,
                 pretrained: np.ndarray | None = None,
                 pretrained_digest: str | None = None):
        self.pipeline = pipeline
        self.n_items = pipeline.base.shape[0]
        self.out_dim = d = pipeline.out_dim
        table = init_id_table(self.n_items, d, rng) if pretrained is None else pretrained
        validate_id_table(table, self.n_items, d)
        self.id_table = ad.Parameter(table.copy(), "fusion.id_table")
        self.origin = "fresh" if pretrained is None else "pretrained"
        self.pretrained_digest = pretrained_digest
        from .adapters import LinearMap
        self.proj = LinearMap(2 * d, d, rng, "fusion.proj")

    def forward(self):
        semantic = self.pipeline.adapted_table()
        ids = ad.narrow(self.id_table, 0, 1, self.n_items + 1)
        fused = self.proj(ad.concat([semantic, ids], axis=-1))
        return _with_padding_row(fused), None

    def params(self):
        return self.pipeline.params() + [self.id_table] + self.proj.params()

    def frozen_entries(self):
        return self.pipeline.frozen_entries()


class AlignSource:
    """Replace-style representations anchored to a frozen pretrained ID
    table by weight * MSE (padding row excluded)."""

    def __init__(self, pipeline: AdapterPipeline, pretrained: np.ndarray,
                 weight: float, pretrained_digest: str | None = None):
        if pretrained is None:
            raise ValueError("alignment requires a pretrained ID checkpoint")
        self.pipeline = pipeline
        self.n_items = pipeline.base.shape[0]
        self.out_dim = pipeline.out_dim
        validate_id_table(pretrained, self.n_items, self.out_dim)
        self.anchor = pretrained.astype(np.float32).copy()
        self.weight = float(weight)
        self.pretrained_digest = pretrained_digest

    def forward(self):
        semantic = self.pipeline.adapted_table()
        aux = None
        # weight 0 skips the term entirely so the training trajectory is
        # step-for-step identical to replace under the same seed
        if self.weight > 0:
            aux = ad.scale(alignment_loss(semantic, self.anchor[1:]), self.weight)
        return _with_padding_row(semantic), aux

    def params(self):
        return self.pipeline.params()

    def frozen_entries(self):
        return self.pipeline.frozen_entries()


def build_source(spec: FusionSpec, pipeline: AdapterPipeline, rng,
                 pretrained: np.ndarray | None = None,
                 pretrained_digest: str | None = None):
    """Construct the item-representation source for a fusion strategy.

    Args:
        rng: numpy Generator for fresh-table / projection initialization.
        pretrained: (N+1) x d ID table; required for align, optional
            initializer for concat, ignored for replace.
    """
    if spec.strategy == "replace":
        return ReplaceSource(pipeline)
    if spec.strategy == "concat":
        return ConcatSource(pipeline, rng, pretrained, pretrained_digest)
    if pretrained is None:
        raise ValueError("alignment requires a pretrained ID checkpoint")
    return AlignSource(pipeline, pretrained, spec.align_weight, pretrained_digest)


def pretrain_id_table(dataset, config, seed: int, out_path=None):
    """Train a plain ID-only sequence model and return its item table.

    Returns (table, history) where table is the trained (N+1) x d array;
    if out_path is given the table is persisted there as an RXCK
    checkpoint under the `id.table` entry.
    """
    from . import seqrec

    rng = np.random.default_rng((seed, 100))
    source = IdOnlySource(dataset.n_items, config.d, rng)
    model, history = seqrec.train(dataset, source, config, seed, init_rng=rng)
    table = source.table.data.copy()
    table[0] = 0.0
    if out_path is not None:
        ckpt.save_checkpoint({ID_TABLE_ENTRY: table}, out_path)
    return table, history
