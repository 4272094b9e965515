"""Shared fixtures: a tiny synthetic corpus for fast unit tests and helpers
for finite-difference gradient checking."""

import numpy as np
import pytest

from semrec import synthetic
from semrec.config import RunConfig


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small but protocol-complete dataset: 200 items so 100-negative
    sampling has room, short training settings."""
    root = tmp_path_factory.mktemp("tiny")
    paths = synthetic.generate(root, n_items=200, n_users=120, n_clusters=10,
                               dim=32, seed=7)
    return paths


@pytest.fixture(scope="session")
def tiny_config(tiny_corpus):
    cfg = RunConfig.load(tiny_corpus["config"])
    return (cfg.with_value("sasrec.epochs", 2)
               .with_value("sasrec.max_len", 16)
               .with_value("sasrec.d", 16)
               .with_value("sasrec.batch_size", 64)
               .with_value("sasrec.patience", 2))


def make_dataset(n_items=150, n_users=40, seed=0, min_len=5, max_len=9):
    """In-memory interaction dataset with enough items for the 100-negative
    evaluation protocol; no files involved."""
    from semrec.catalog import InteractionDataset, UserSequence

    rng = np.random.default_rng(seed)
    users = []
    for uid in range(1, n_users + 1):
        length = int(rng.integers(min_len, max_len + 1))
        items = (rng.permutation(n_items)[:length] + 1).tolist()
        users.append(UserSequence(user_id=uid, items=items))
    return InteractionDataset(users=users, n_items=n_items, min_length=min_len)


def finite_difference(f, params, h=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each Parameter's
    entries. Parameters must hold float64 data."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gf[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """max |a-n| / max(|a|+|n|, 1e-6) over all entries of all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def promote_f64(params):
    """Cast parameters (in place) to float64 for high-precision checks."""
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)
    return params
