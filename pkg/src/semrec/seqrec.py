"""Self-attentive sequential recommender trained on fused item
representations.

The model is the standard two-block causal transformer for next-item
prediction: item representations scaled by sqrt(d), learned positions,
pre-layer-norm residual blocks (multi-head attention + two-layer pointwise
feed-forward), and a final layer norm. Sequences are left-padded with id 0
and capped at max_len; padding is excluded from attention keys and from
the loss, and padded hidden rows are zeroed after every block.

Training uses binary cross-entropy on inner-product scores with one
uniformly sampled negative per position (negatives never come from the
user's history), or optionally full softmax cross-entropy over the
catalog. Early stopping watches validation NDCG@10.

The item-representation source is any object with forward(), params() and
frozen_entries(); see the fusion module for the concrete strategies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import evaluation

MAX_NEGATIVE_RETRIES = 100


@dataclass
class SasrecConfig:
    max_len: int = 50
    blocks: int = 2
    heads: int = 1
    d: int = 64
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    patience: int = 10
    loss: str = "bce"

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.loss not in ("bce", "softmax"):
            raise ValueError(f"loss must be 'bce' or 'softmax', got {self.loss!r}")
        for field_name in ("blocks", "heads", "batch_size", "epochs", "patience"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class _Block:
    def __init__(self, d, rng, name):
        def w(suffix):
            return ad.Parameter(_uniform(rng, (d, d), d), f"{name}.{suffix}")

        def b(suffix):
            return ad.Parameter(np.zeros(d, dtype=np.float32), f"{name}.{suffix}")

        self.ln1_g = ad.Parameter(np.ones(d, dtype=np.float32), f"{name}.ln1.g")
        self.ln1_b = b("ln1.b")
        self.wq, self.bq = w("attn.wq"), b("attn.bq")
        self.wk, self.bk = w("attn.wk"), b("attn.bk")
        self.wv, self.bv = w("attn.wv"), b("attn.bv")
        self.wo, self.bo = w("attn.wo"), b("attn.bo")
        self.ln2_g = ad.Parameter(np.ones(d, dtype=np.float32), f"{name}.ln2.g")
        self.ln2_b = b("ln2.b")
        self.ffn_w1, self.ffn_b1 = w("ffn.w1"), b("ffn.b1")
        self.ffn_w2, self.ffn_b2 = w("ffn.w2"), b("ffn.b2")

    def params(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
                self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]


class SasrecModel:
    def __init__(self, config: SasrecConfig, rng: np.random.Generator):
        self.config = config
        d, L = config.d, config.max_len
        self.pos = ad.Parameter(_uniform(rng, (L, d), d), "sasrec.pos")
        self.blocks = [_Block(d, rng, f"sasrec.b{i}") for i in range(config.blocks)]
        self.ln_f_g = ad.Parameter(np.ones(d, dtype=np.float32), "sasrec.ln_f.g")
        self.ln_f_b = ad.Parameter(np.zeros(d, dtype=np.float32), "sasrec.ln_f.b")

    def params(self):
        ps = [self.pos]
        for blk in self.blocks:
            ps.extend(blk.params())
        return ps + [self.ln_f_g, self.ln_f_b]

    def _attention(self, h, blk, attn_mask, drop_rng):
        cfg = self.config
        dh = cfg.d // cfg.heads
        q = ad.add(ad.matmul(h, blk.wq), blk.bq)
        k = ad.add(ad.matmul(h, blk.wk), blk.bk)
        v = ad.add(ad.matmul(h, blk.wv), blk.bv)
        heads = []
        for i in range(cfg.heads):
            qh = ad.narrow(q, -1, i * dh, (i + 1) * dh)
            kh = ad.narrow(k, -1, i * dh, (i + 1) * dh)
            vh = ad.narrow(v, -1, i * dh, (i + 1) * dh)
            scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), 1.0 / math.sqrt(dh))
            weights = ad.softmax(ad.add(scores, attn_mask), axis=-1)
            if drop_rng is not None:
                weights = ad.dropout(weights, cfg.dropout, drop_rng)
            heads.append(ad.matmul(weights, vh))
        merged = heads[0] if cfg.heads == 1 else ad.concat(heads, axis=-1)
        return ad.add(ad.matmul(merged, blk.wo), blk.bo)

    def forward(self, reps: ad.Tensor, ids: np.ndarray,
                drop_rng: np.random.Generator | None = None) -> ad.Tensor:
        """Hidden states (B, max_len, d) for left-padded id sequences.

        reps is the full (N+1) x d representation table (row 0 = padding).
        drop_rng None disables dropout (inference mode).
        """
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
            raise ad.ShapeError(f"ids must be (B, {cfg.max_len}), got {ids.shape}")
        L = cfg.max_len
        real = ids != 0
        mask = ad.Tensor(real[..., None].astype(np.float32))
        causal = np.triu(np.full((L, L), -1e9, dtype=np.float32), k=1)
        keypad = np.where(real, 0.0, -1e9).astype(np.float32)[:, None, :]
        attn_mask = ad.Tensor(causal[None, :, :] + keypad)

        x = ad.scale(ad.embedding_lookup(reps, ids), math.sqrt(cfg.d))
        x = ad.add(x, self.pos)
        if drop_rng is not None:
            x = ad.dropout(x, cfg.dropout, drop_rng)
        x = ad.mul(x, mask)
        for blk in self.blocks:
            h = ad.layer_norm(x, blk.ln1_g, blk.ln1_b)
            out = self._attention(h, blk, attn_mask, drop_rng)
            if drop_rng is not None:
                out = ad.dropout(out, cfg.dropout, drop_rng)
            x = ad.mul(ad.add(x, out), mask)
            h = ad.layer_norm(x, blk.ln2_g, blk.ln2_b)
            f = ad.relu(ad.add(ad.matmul(h, blk.ffn_w1), blk.ffn_b1))
            if drop_rng is not None:
                f = ad.dropout(f, cfg.dropout, drop_rng)
            f = ad.add(ad.matmul(f, blk.ffn_w2), blk.ffn_b2)
            if drop_rng is not None:
                f = ad.dropout(f, cfg.dropout, drop_rng)
            x = ad.mul(ad.add(x, f), mask)
        x = ad.layer_norm(x, self.ln_f_g, self.ln_f_b)
        return ad.mul(x, mask)


def bce_loss(hidden: ad.Tensor, reps: ad.Tensor, positives: np.ndarray,
             negatives: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """-[log sigmoid(h.e_pos) + log sigmoid(-h.e_neg)] averaged over
    non-padding positions."""
    count = float(mask.sum())
    if count <= 0:
        raise ValueError("bce_loss: batch has no non-padding positions")
    e_pos = ad.embedding_lookup(reps, positives)
    e_neg = ad.embedding_lookup(reps, negatives)
    s_pos = ad.reduce_sum(ad.mul(hidden, e_pos), axis=-1)
    s_neg = ad.reduce_sum(ad.mul(hidden, e_neg), axis=-1)
    term = ad.add(ad.log_sigmoid(s_pos), ad.log_sigmoid(ad.scale(s_neg, -1.0)))
    total = ad.reduce_sum(ad.mul(term, ad.Tensor(mask.astype(np.float32))))
    return ad.scale(total, -1.0 / count)


def softmax_loss(hidden: ad.Tensor, reps: ad.Tensor, positives: np.ndarray,
                 mask: np.ndarray) -> ad.Tensor:
    """Full cross-entropy over all real items (padding column excluded)."""
    n_plus_1 = reps.shape[0]
    real = ad.narrow(reps, 0, 1, n_plus_1)
    logits = ad.matmul(hidden, ad.transpose_last(real))
    targets = np.where(mask > 0, positives - 1, 0)
    return ad.softmax_xent(logits, targets, mask)


def pad_contexts(contexts, max_len: int) -> np.ndarray:
    """Left-pad (and left-truncate) item-id sequences to (B, max_len)."""
    out = np.zeros((len(contexts), max_len), dtype=np.int64)
    for i, seq in enumerate(contexts):
        tail = list(seq)[-max_len:]
        if tail:
            out[i, -len(tail):] = tail
    return out


def _training_batch(users, max_len, n_items, rng_neg):
    """Inputs, positives, sampled negatives and the loss mask for a user
    chunk. Negatives are redrawn until outside each user's history."""
    B = len(users)
    inputs = np.zeros((B, max_len), dtype=np.int64)
    positives = np.zeros((B, max_len), dtype=np.int64)
    for i, (user, _) in enumerate(users):
        window = user.train_items[-(max_len + 1):]
        x, y = window[:-1], window[1:]
        inputs[i, max_len - len(x):] = x
        positives[i, max_len - len(y):] = y
    mask = (positives != 0).astype(np.float32)
    negatives = rng_neg.integers(1, n_items + 1, size=(B, max_len))
    for attempt in range(MAX_NEGATIVE_RETRIES + 1):
        bad = []
        for i, (_, hist) in enumerate(users):
            for t in range(max_len):
                if mask[i, t] and negatives[i, t] in hist:
                    bad.append((i, t))
        if not bad:
            break
        if attempt == MAX_NEGATIVE_RETRIES:
            raise RuntimeError(f"negative sampling failed after "
                               f"{MAX_NEGATIVE_RETRIES} retries "
                               f"({len(bad)} positions still colliding)")
        for i, t in bad:
            negatives[i, t] = rng_neg.integers(1, n_items + 1)
    return inputs, positives, negatives, mask


class Scorer:
    """Deterministic candidate scorer over a trained model: inner product
    of the last hidden state with each candidate's representation."""

    def __init__(self, model: SasrecModel, source):
        self.model = model
        self.reps = source.forward()[0].data

    def score_batch(self, contexts, candidates) -> np.ndarray:
        ids = pad_contexts(contexts, self.model.config.max_len)
        hidden = self.model.forward(ad.Tensor(self.reps), ids, drop_rng=None)
        last = hidden.data[:, -1, :]
        cand = self.reps[np.asarray(candidates)]
        return np.einsum("bd,bcd->bc", last, cand)


def count_params(params) -> int:
    return int(sum(p.data.size for p in params))


def save_model(path, model: SasrecModel, source):
    entries = {p.name: p.data for p in model.params() + source.params()}
    entries.update(source.frozen_entries())
    ckpt.save_checkpoint(entries, path)


def load_model(entries, config: SasrecConfig, source) -> SasrecModel:
    """Rebuild a model (and restore source parameters) from checkpoint
    entries. Every trainable parameter must be present with its exact
    shape; frozen adapter entries are restored by the adapter layer."""
    model = SasrecModel(config, np.random.default_rng(0))
    for p in model.params() + source.params():
        if p.name not in entries:
            raise ValueError(f"checkpoint missing parameter {p.name!r}")
        value = entries[p.name]
        if value.shape != p.data.shape:
            raise ValueError(f"checkpoint entry {p.name!r} has shape "
                             f"{value.shape}, expected {p.data.shape}")
        p.data[...] = value
    return model


def train(dataset, source, config: SasrecConfig, seed: int,
          init_rng: np.random.Generator | None = None):
    """Train with Adam and early stopping on validation NDCG@10.

    All randomness (shuffling, negative sampling, dropout, init) derives
    from the run seed via fixed substreams, so identical calls produce
    bit-identical models.

    Returns:
        (model, history): history records per-epoch mean loss and
        validation NDCG@10, the first-epoch per-step losses, and the best
        epoch index.
    """
    if source.out_dim != config.d:
        raise ValueError(f"source dim {source.out_dim} != model dim {config.d}")
    model = SasrecModel(config, init_rng or np.random.default_rng((seed, 100)))
    rng_shuffle = np.random.default_rng((seed, 101))
    rng_neg = np.random.default_rng((seed, 102))
    rng_drop = np.random.default_rng((seed, 103))

    params = model.params() + source.params()
    adam = ad.AdamState(lr=config.lr)
    histories = [set(u.history()) for u in dataset.users]
    user_pool = list(zip(dataset.users, histories))

    history = {"epoch_loss": [], "valid_ndcg10": [], "first_epoch_step_losses": [],
               "best_epoch": -1, "epochs_run": 0}
    best_metric = -1.0
    best_snapshot = None
    since_best = 0
    step = 0
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(len(user_pool))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [user_pool[j] for j in order[start:start + config.batch_size]]
            inputs, positives, negatives, mask = _training_batch(
                chunk, config.max_len, dataset.n_items, rng_neg)
            with ad.Tape() as tape:
                reps, aux = source.forward()
                hidden = model.forward(reps, inputs, drop_rng=rng_drop)
                if config.loss == "bce":
                    loss = bce_loss(hidden, reps, positives, negatives, mask)
                else:
                    loss = softmax_loss(hidden, reps, positives, mask)
                if aux is not None:
                    loss = ad.add(loss, aux)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise RuntimeError(f"training diverged: non-finite loss at step {step}")
                tape.backward(loss)
            ad.adam_step(params, adam)
            losses.append(value)
            if epoch == 0:
                history["first_epoch_step_losses"].append(value)
            step += 1
        valid_metrics, _ = evaluation.evaluate_split(
            dataset, Scorer(model, source), seed, split="valid")
        ndcg = valid_metrics["NDCG@10"]
        history["epoch_loss"].append(float(np.mean(losses)))
        history["valid_ndcg10"].append(ndcg)
        history["epochs_run"] = epoch + 1
        if ndcg > best_metric:
            best_metric = ndcg
            best_snapshot = [p.data.copy() for p in params]
            history["best_epoch"] = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best_snapshot is not None:
        for p, value in zip(params, best_snapshot):
            p.data[...] = value
    return model, history
