"""Leave-one-out ranking evaluation with sampled negatives.

Each test case ranks the held-out target against 100 sampled negatives
drawn uniformly from the items the user never interacted with (full
history excluded: train, validation and test items). Reported metrics are
HR@K and NDCG@K for K in {5, 10}, averaged over users per seed and over
seeds {42, 43, 44} with the population standard deviation.

Negative draws come from a dedicated rng stream keyed by
(seed, user_id, split) so they are independent of training rng under the
same seed and stable across processes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SPLIT_TEST = 0
SPLIT_VALID = 1

DEFAULT_SEEDS = (42, 43, 44)
DEFAULT_K = (5, 10)
N_NEGATIVES = 100


def sample_negatives(history, n_items: int, seed: int, user_id: int,
                     n: int = N_NEGATIVES, split: int = SPLIT_TEST) -> np.ndarray:
    """Draw n distinct uninteracted item ids for one user.

    Args:
        history: every item id the user ever interacted with (train,
            validation and test), any iterable.
        n_items: catalog size; valid ids are 1..n_items.
        seed: run seed; the stream is keyed by (seed, user_id, split).

    Returns:
        (n,) int64 array, uniform without replacement over the eligible
        items (ascending-id order before the seeded draw).
    """
    seen = set(history)
    eligible = np.array([i for i in range(1, n_items + 1) if i not in seen],
                        dtype=np.int64)
    if eligible.size < n:
        raise ValueError(f"catalog too small: {n_items} items minus "
                         f"{len(seen)} in history leaves {eligible.size} "
                         f"candidates, need {n}")
    rng = np.random.default_rng((seed, user_id, split))
    return rng.choice(eligible, size=n, replace=False)


def rank_of_target(target_score: float, negative_scores) -> int:
    """0-based rank of the target among the candidates.

    Ties are pessimistic: negatives scoring equal to the target count as
    ranked above it.
    """
    neg = np.asarray(negative_scores)
    return int(np.sum(neg > target_score) + np.sum(neg == target_score))


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank < k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 2) if rank < k else 0.0


def metric_names(k_values=DEFAULT_K):
    names = []
    for k in k_values:
        names.append(f"HR@{k}")
    for k in k_values:
        names.append(f"NDCG@{k}")
    return names


def evaluate_split(dataset, scorer, seed: int, split: str = "test",
                   n_negatives: int = N_NEGATIVES, k_values=DEFAULT_K,
                   batch_size: int = 256):
    """Average ranking metrics over every user of a dataset split.

    Args:
        scorer: object with score_batch(contexts, candidates) -> (B, C)
            scores, where contexts is a list of item-id lists and
            candidates a (B, C) int array. Must be deterministic.
        split: "test" or "valid".

    Returns:
        (metrics, ranks): metric-name -> mean value, and the per-user
        0-based rank array in dataset user order.
    """
    if split not in ("test", "valid"):
        raise ValueError(f"unknown split {split!r}")
    tag = SPLIT_TEST if split == "test" else SPLIT_VALID
    users = dataset.users
    ranks = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        contexts = []
        candidates = np.empty((len(chunk), 1 + n_negatives), dtype=np.int64)
        for i, user in enumerate(chunk):
            if split == "test":
                target, context = user.test_target, user.test_context
            else:
                target, context = user.valid_target, user.valid_context
            negatives = sample_negatives(user.history(), dataset.n_items, seed,
                                         user.user_id, n_negatives, tag)
            candidates[i, 0] = target
            candidates[i, 1:] = negatives
            contexts.append(context)
        scores = np.asarray(scorer.score_batch(contexts, candidates))
        for i in range(len(chunk)):
            ranks[start + i] = rank_of_target(scores[i, 0], scores[i, 1:])
    metrics = {}
    for k in k_values:
        metrics[f"HR@{k}"] = float(np.mean([hr_at_k(r, k) for r in ranks]))
    for k in k_values:
        metrics[f"NDCG@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
    return metrics, ranks


@dataclass
class MetricsReport:
    """Per-seed metrics with cross-seed mean and population std, plus run
    provenance."""

    seeds: tuple
    per_seed: dict                      # seed -> {metric: value}
    k_values: tuple = DEFAULT_K
    provenance: dict = field(default_factory=dict)

    @property
    def mean(self):
        return {m: float(np.mean([self.per_seed[s][m] for s in self.seeds]))
                for m in metric_names(self.k_values)}

    @property
    def std(self):
        return {m: float(np.std([self.per_seed[s][m] for s in self.seeds]))
                for m in metric_names(self.k_values)}

    def validate(self):
        ks = sorted(self.k_values)
        for s in self.seeds:
            vals = self.per_seed[s]
            for m, v in vals.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{m} out of [0, 1] for seed {s}: {v}")
            for small, big in zip(ks, ks[1:]):
                if vals[f"HR@{small}"] > vals[f"HR@{big}"] + 1e-12:
                    raise ValueError(f"HR@{small} > HR@{big} for seed {s}")
                if vals[f"NDCG@{small}"] > vals[f"NDCG@{big}"] + 1e-12:
                    raise ValueError(f"NDCG@{small} > NDCG@{big} for seed {s}")
            for k in ks:
                if vals[f"NDCG@{k}"] > vals[f"HR@{k}"] + 1e-12:
                    raise ValueError(f"NDCG@{k} > HR@{k} for seed {s}")

    def render(self) -> str:
        """Aligned text table: one metric per row, one seed per column,
        then mean and std."""
        names = metric_names(self.k_values)
        header = ["metric"] + [f"seed{s}" for s in self.seeds] + ["mean", "std"]
        rows = [header]
        mean, std = self.mean, self.std
        for m in names:
            row = [m] + [f"{self.per_seed[s][m]:.4f}" for s in self.seeds]
            row += [f"{mean[m]:.4f}", f"{std[m]:.4f}"]
            rows.append(row)
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = []
        for r in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def to_records(self):
        """Machine-readable line-delimited records (stable key order)."""
        records = []
        for s in self.seeds:
            for m in metric_names(self.k_values):
                records.append({"kind": "seed_metric", "metric": m, "seed": s,
                                "value": self.per_seed[s][m]})
        mean, std = self.mean, self.std
        for m in metric_names(self.k_values):
            records.append({"kind": "summary", "metric": m,
                            "mean": mean[m], "std": std[m]})
        records.append({"kind": "provenance", **self.provenance})
        return [json.dumps(r, sort_keys=True) for r in records]

    @classmethod
    def from_records(cls, lines):
        per_seed = {}
        provenance = {}
        ks = set()
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "seed_metric":
                per_seed.setdefault(rec["seed"], {})[rec["metric"]] = rec["value"]
                ks.add(int(rec["metric"].split("@")[1]))
            elif rec["kind"] == "provenance":
                provenance = {k: v for k, v in rec.items() if k != "kind"}
        return cls(seeds=tuple(sorted(per_seed)), per_seed=per_seed,
                   k_values=tuple(sorted(ks)), provenance=provenance)


def evaluate_run(dataset, scorers: dict, seeds=DEFAULT_SEEDS, split="test",
                 n_negatives: int = N_NEGATIVES, k_values=DEFAULT_K,
                 provenance=None) -> MetricsReport:
    """Evaluate one trained scorer per seed and aggregate.

    Args:
        scorers: seed -> scorer (see evaluate_split); every listed seed
            must be present.
    """
    missing = [s for s in seeds if s not in scorers]
    if missing:
        raise ValueError(f"missing checkpoints for seeds {missing}")
    per_seed = {}
    for s in seeds:
        metrics, _ = evaluate_split(dataset, scorers[s], s, split,
                                    n_negatives, k_values)
        per_seed[s] = metrics
    report = MetricsReport(seeds=tuple(seeds), per_seed=per_seed,
                           k_values=tuple(k_values),
                           provenance=dict(provenance or {}))
    report.validate()
    return report
