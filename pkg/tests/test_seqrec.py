"""Sequence model: causality, loss oracles, parameter counts, determinism,
divergence detection, and checkpoint round trips."""

import math

import numpy as np
import pytest

from conftest import make_dataset
from semrec import autodiff as ad
from semrec import checkpoint as ckpt
from semrec import fusion
from semrec import seqrec
from semrec.adapters import AdapterSpec, build_adapter_pipeline
from semrec.catalog import UserSequence
from semrec.evaluation import evaluate_split
from semrec.seqrec import SasrecConfig


def _mini_config(**over):
    base = dict(max_len=8, blocks=1, heads=1, d=8, dropout=0.0, lr=1e-3,
                batch_size=16, epochs=2, patience=2)
    base.update(over)
    return SasrecConfig(**base)


def _model_and_table(config=None, n_items=20, seed=0):
    config = config or _mini_config()
    model = seqrec.SasrecModel(config, np.random.default_rng(seed))
    table = np.random.default_rng(seed + 1).normal(
        size=(n_items + 1, config.d)).astype(np.float32)
    table[0] = 0.0
    return model, table


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -np.float64(x))


class TestConfig:
    @pytest.mark.parametrize("kw,msg", [
        (dict(max_len=1), "max_len"),
        (dict(d=10, heads=3), "not divisible"),
        (dict(dropout=1.0), "dropout"),
        (dict(loss="hinge"), "'bce' or 'softmax'"),
        (dict(epochs=0), "epochs"),
        (dict(patience=0), "patience"),
    ])
    def test_validation(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            _mini_config(**kw)


class TestPadContexts:
    def test_left_pad_and_truncate(self):
        out = seqrec.pad_contexts([[5, 6], [1, 2, 3, 4, 5], []], 4)
        np.testing.assert_array_equal(out, [[0, 0, 5, 6],
                                            [2, 3, 4, 5],
                                            [0, 0, 0, 0]])


class TestForward:
    def test_causality_prefix_is_untouched(self):
        model, table = _model_and_table()
        ids = np.array([[0, 0, 1, 2, 3, 4, 5, 6]])
        h1 = model.forward(ad.Tensor(table), ids, drop_rng=None).data
        changed = ids.copy()
        changed[0, 5] = 9  # item at position 5 replaced
        h2 = model.forward(ad.Tensor(table), changed, drop_rng=None).data
        np.testing.assert_array_equal(h1[0, :5], h2[0, :5])
        assert np.any(h1[0, 5] != h2[0, 5])
        assert np.any(h1[0, -1] != h2[0, -1])

    def test_batch_rows_are_independent(self):
        model, table = _model_and_table()
        ids = np.array([[0, 0, 1, 2, 3, 4, 5, 6],
                        [0, 0, 0, 7, 8, 9, 1, 2]])
        h1 = model.forward(ad.Tensor(table), ids, drop_rng=None).data
        changed = ids.copy()
        changed[1, 4] = 3
        h2 = model.forward(ad.Tensor(table), changed, drop_rng=None).data
        np.testing.assert_array_equal(h1[0], h2[0])

    def test_padding_positions_stay_zero(self):
        model, table = _model_and_table()
        ids = np.array([[0, 0, 0, 0, 0, 1, 2, 3],
                        [0, 0, 0, 0, 0, 0, 0, 0]])
        h = model.forward(ad.Tensor(table), ids, drop_rng=None).data
        assert np.all(h[0, :5] == 0)
        assert np.all(h[1] == 0)
        assert np.any(h[0, 5:] != 0)

    def test_shape_validation(self):
        model, table = _model_and_table()
        with pytest.raises(ad.ShapeError, match="ids must be"):
            model.forward(ad.Tensor(table), np.zeros((2, 5), dtype=np.int64))


class TestParamCount:
    def test_closed_form(self):
        cfg = _mini_config(blocks=3, d=16, heads=2, max_len=12)
        model = seqrec.SasrecModel(cfg, np.random.default_rng(0))
        d, L, B = cfg.d, cfg.max_len, cfg.blocks
        per_block = 4 * (d * d + d) + 2 * (2 * d) + 2 * (d * d + d)
        expected = L * d + 2 * d + B * per_block
        assert seqrec.count_params(model.params()) == expected

    def test_id_only_source_adds_full_table(self):
        cfg = _mini_config()
        model = seqrec.SasrecModel(cfg, np.random.default_rng(0))
        src = fusion.IdOnlySource(30, cfg.d, np.random.default_rng(1))
        total = seqrec.count_params(model.params() + src.params())
        assert total == seqrec.count_params(model.params()) + 31 * cfg.d

    def test_unique_param_names(self):
        cfg = _mini_config(blocks=2)
        model = seqrec.SasrecModel(cfg, np.random.default_rng(0))
        names = [p.name for p in model.params()]
        assert len(names) == len(set(names))


class TestBceLoss:
    def test_naive_oracle(self):
        rng = np.random.default_rng(3)
        B, L, d, n = 3, 5, 4, 12
        hidden = rng.normal(size=(B, L, d)).astype(np.float32)
        table = rng.normal(size=(n + 1, d)).astype(np.float32)
        pos = rng.integers(1, n + 1, size=(B, L))
        neg = rng.integers(1, n + 1, size=(B, L))
        mask = (rng.random((B, L)) < 0.7).astype(np.float32)
        mask[0, 0] = 1.0  # at least one live position
        loss = seqrec.bce_loss(ad.Tensor(hidden), ad.Tensor(table), pos, neg, mask)
        total, count = 0.0, 0
        for i in range(B):
            for t in range(L):
                if mask[i, t]:
                    sp = float(hidden[i, t].astype(np.float64)
                               @ table[pos[i, t]].astype(np.float64))
                    sn = float(hidden[i, t].astype(np.float64)
                               @ table[neg[i, t]].astype(np.float64))
                    total += -(_log_sigmoid(sp) + _log_sigmoid(-sn))
                    count += 1
        assert float(loss.data) == pytest.approx(total / count, rel=1e-4)

    def test_orthogonal_scores_give_two_log_two(self):
        # hidden along axis 0, embeddings along axes 1 and 2: all scores 0
        hidden = np.zeros((1, 2, 3), dtype=np.float32)
        hidden[:, :, 0] = 1.0
        table = np.zeros((3, 3), dtype=np.float32)
        table[1, 1] = 1.0
        table[2, 2] = 1.0
        pos = np.array([[1, 1]])
        neg = np.array([[2, 2]])
        mask = np.ones((1, 2), dtype=np.float32)
        loss = seqrec.bce_loss(ad.Tensor(hidden), ad.Tensor(table), pos, neg, mask)
        assert float(loss.data) == pytest.approx(2.0 * math.log(2.0), rel=1e-6)

    def test_saturated_scores_stay_finite(self):
        hidden = np.full((1, 1, 2), 40.0, dtype=np.float32)
        table = np.zeros((3, 2), dtype=np.float32)
        table[1] = [1.0, 0.0]
        table[2] = [-1.0, 0.0]
        pos, neg = np.array([[1]]), np.array([[2]])
        mask = np.ones((1, 1), dtype=np.float32)
        good = seqrec.bce_loss(ad.Tensor(hidden), ad.Tensor(table), pos, neg, mask)
        assert 0.0 <= float(good.data) < 1e-5
        flipped = seqrec.bce_loss(ad.Tensor(hidden), ad.Tensor(table),
                                  np.array([[2]]), np.array([[1]]), mask)
        assert float(flipped.data) == pytest.approx(80.0, rel=1e-4)

    def test_all_padding_rejected(self):
        hidden = np.zeros((1, 2, 3), dtype=np.float32)
        table = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="no non-padding positions"):
            seqrec.bce_loss(ad.Tensor(hidden), ad.Tensor(table),
                            np.zeros((1, 2), dtype=np.int64),
                            np.zeros((1, 2), dtype=np.int64),
                            np.zeros((1, 2), dtype=np.float32))


class TestSoftmaxLoss:
    def test_naive_oracle(self):
        rng = np.random.default_rng(4)
        B, L, d, n = 2, 4, 3, 9
        hidden = rng.normal(size=(B, L, d)).astype(np.float32)
        table = rng.normal(size=(n + 1, d)).astype(np.float32)
        pos = rng.integers(1, n + 1, size=(B, L))
        mask = np.ones((B, L), dtype=np.float32)
        mask[1, :2] = 0.0
        loss = seqrec.softmax_loss(ad.Tensor(hidden), ad.Tensor(table), pos, mask)
        total, count = 0.0, 0
        for i in range(B):
            for t in range(L):
                if mask[i, t]:
                    logits = hidden[i, t].astype(np.float64) @ table[1:].astype(np.float64).T
                    lse = np.logaddexp.reduce(logits)
                    total += lse - logits[pos[i, t] - 1]
                    count += 1
        assert float(loss.data) == pytest.approx(total / count, rel=1e-4)


class TestTrainingBatch:
    def _user(self, items):
        u = UserSequence(user_id=1, items=items)
        return (u, set(items))

    def test_window_and_shift(self):
        users = [self._user([1, 2, 3, 4, 5, 6, 7])]  # train_items = 1..5
        rng = np.random.default_rng(0)
        inputs, pos, neg, mask = seqrec._training_batch(users, 4, 100, rng)
        np.testing.assert_array_equal(inputs, [[1, 2, 3, 4]])
        np.testing.assert_array_equal(pos, [[2, 3, 4, 5]])
        np.testing.assert_array_equal(mask, [[1, 1, 1, 1]])

    def test_long_history_keeps_last_window(self):
        items = list(range(1, 21))  # train_items = 1..18
        users = [self._user(items)]
        inputs, pos, _, _ = seqrec._training_batch(users, 4, 100,
                                                   np.random.default_rng(0))
        np.testing.assert_array_equal(inputs, [[14, 15, 16, 17]])
        np.testing.assert_array_equal(pos, [[15, 16, 17, 18]])

    def test_short_history_left_pads(self):
        users = [self._user([3, 9, 4, 5, 6])]  # train_items = [3, 9, 4]
        inputs, pos, _, mask = seqrec._training_batch(users, 6, 100,
                                                      np.random.default_rng(0))
        np.testing.assert_array_equal(inputs, [[0, 0, 0, 0, 3, 9]])
        np.testing.assert_array_equal(pos, [[0, 0, 0, 0, 9, 4]])
        np.testing.assert_array_equal(mask, [[0, 0, 0, 0, 1, 1]])

    def test_negatives_avoid_full_history(self):
        history = set(range(1, 15))
        users = [(UserSequence(1, list(range(1, 10))), history)]
        for trial in range(10):
            _, _, neg, mask = seqrec._training_batch(
                users, 6, 20, np.random.default_rng(trial))
            live = neg[mask.astype(bool)]
            assert np.all((live >= 15) & (live <= 20))

    def test_retry_exhaustion(self):
        users = [(UserSequence(1, list(range(1, 6))), set(range(1, 6)))]
        with pytest.raises(RuntimeError, match="100 retries"):
            seqrec._training_batch(users, 4, 5, np.random.default_rng(0))


class TestTraining:
    def test_same_seed_bit_identical_checkpoints(self, tmp_path):
        dataset = make_dataset(n_items=150, n_users=30, seed=5)
        paths = []
        for run in range(2):
            rng = np.random.default_rng(77)
            src = fusion.IdOnlySource(150, 8, rng)
            model, _ = seqrec.train(dataset, src, _mini_config(dropout=0.2),
                                    seed=9, init_rng=rng)
            p = tmp_path / f"run{run}.ckpt"
            seqrec.save_model(p, model, src)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_frozen_semantic_base_untouched(self):
        dataset = make_dataset(n_items=150, n_users=25, seed=6)
        rows = np.random.default_rng(7).normal(size=(150, 12)).astype(np.float32)
        pipe = build_adapter_pipeline(AdapterSpec("linear", input_dim=12, d=8),
                                      rows, np.random.default_rng(8))
        before = pipe.base.copy()
        src = fusion.ReplaceSource(pipe)
        seqrec.train(dataset, src, _mini_config(epochs=1), seed=10)
        np.testing.assert_array_equal(pipe.base, before)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_step_index(self):
        dataset = make_dataset(n_items=150, n_users=25, seed=7)
        src = fusion.IdOnlySource(150, 8, np.random.default_rng(0))
        cfg = _mini_config(lr=1e19, epochs=3)
        with pytest.raises(RuntimeError, match=r"non-finite loss at step \d+"):
            seqrec.train(dataset, src, cfg, seed=11)

    def test_best_epoch_and_snapshot_restore(self):
        dataset = make_dataset(n_items=150, n_users=30, seed=8)
        rng = np.random.default_rng(12)
        src = fusion.IdOnlySource(150, 8, rng)
        model, history = seqrec.train(dataset, src, _mini_config(epochs=3),
                                      seed=13, init_rng=rng)
        curve = history["valid_ndcg10"]
        assert history["best_epoch"] == int(np.argmax(curve))
        # restored weights must reproduce the recorded best validation score
        metrics, _ = evaluate_split(dataset, seqrec.Scorer(model, src), 13,
                                    split="valid")
        assert metrics["NDCG@10"] == curve[history["best_epoch"]]
        assert len(history["epoch_loss"]) == history["epochs_run"]
        assert len(history["first_epoch_step_losses"]) >= 1

    def test_source_dim_mismatch(self):
        dataset = make_dataset(n_items=150, n_users=10, seed=9)
        src = fusion.IdOnlySource(150, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="source dim 4 != model dim 8"):
            seqrec.train(dataset, src, _mini_config(), seed=1)

    def test_softmax_mode_trains(self):
        dataset = make_dataset(n_items=150, n_users=20, seed=10)
        rng = np.random.default_rng(14)
        src = fusion.IdOnlySource(150, 8, rng)
        _, history = seqrec.train(dataset, src,
                                  _mini_config(loss="softmax", epochs=1),
                                  seed=15, init_rng=rng)
        assert history["epochs_run"] == 1
        assert all(math.isfinite(v) for v in history["epoch_loss"])


class TestScorer:
    def _trained(self):
        dataset = make_dataset(n_items=150, n_users=20, seed=11)
        rng = np.random.default_rng(16)
        src = fusion.IdOnlySource(150, 8, rng)
        model, _ = seqrec.train(dataset, src, _mini_config(epochs=1),
                                seed=17, init_rng=rng)
        return seqrec.Scorer(model, src)

    def test_deterministic_and_pure(self):
        scorer = self._trained()
        contexts = [[1, 2, 3], [4, 5, 6, 7]]
        cands = np.array([[8, 9, 10], [11, 12, 13]])
        s1 = scorer.score_batch(contexts, cands)
        before = [p.data.copy() for p in scorer.model.params()]
        s2 = scorer.score_batch(contexts, cands)
        np.testing.assert_array_equal(s1, s2)
        for p, b in zip(scorer.model.params(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_candidate_order_equivariance(self):
        scorer = self._trained()
        contexts = [[1, 2, 3]]
        cands = np.array([[8, 9, 10, 11]])
        perm = np.array([[10, 8, 11, 9]])
        s = scorer.score_batch(contexts, cands)
        sp = scorer.score_batch(contexts, perm)
        np.testing.assert_allclose(sp[0], s[0][[2, 0, 3, 1]], rtol=1e-6)

    def test_context_row_independence(self):
        scorer = self._trained()
        cands = np.array([[8, 9], [8, 9]])
        s_pair = scorer.score_batch([[1, 2, 3], [4, 5]], cands)
        s_solo = scorer.score_batch([[1, 2, 3]], cands[:1])
        np.testing.assert_allclose(s_pair[0], s_solo[0], rtol=1e-6)


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        cfg = _mini_config()
        rng = np.random.default_rng(18)
        src = fusion.IdOnlySource(20, cfg.d, rng)
        model = seqrec.SasrecModel(cfg, rng)
        path = tmp_path / "m.ckpt"
        seqrec.save_model(path, model, src)
        entries = ckpt.load_checkpoint(path)
        src2 = fusion.IdOnlySource(20, cfg.d, np.random.default_rng(99))
        model2 = seqrec.load_model(entries, cfg, src2)
        for a, b in zip(model.params() + src.params(),
                        model2.params() + src2.params()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.data, b.data)

    def test_missing_and_misshapen_entries(self, tmp_path):
        cfg = _mini_config()
        rng = np.random.default_rng(19)
        src = fusion.IdOnlySource(20, cfg.d, rng)
        model = seqrec.SasrecModel(cfg, rng)
        path = tmp_path / "m.ckpt"
        seqrec.save_model(path, model, src)
        entries = ckpt.load_checkpoint(path)
        missing = dict(entries)
        del missing["sasrec.pos"]
        with pytest.raises(ValueError, match="missing parameter 'sasrec.pos'"):
            seqrec.load_model(missing, cfg,
                              fusion.IdOnlySource(20, cfg.d, np.random.default_rng(0)))
        bad = dict(entries)
        bad["sasrec.pos"] = bad["sasrec.pos"][:, :4]
        with pytest.raises(ValueError, match="has shape"):
            seqrec.load_model(bad, cfg,
                              fusion.IdOnlySource(20, cfg.d, np.random.default_rng(0)))
