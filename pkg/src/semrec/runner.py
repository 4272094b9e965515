"""End-to-end experiment orchestration with content-addressed stage caching.

A run decomposes into stages: ingest (catalog + interactions), pool
(token file -> item table), adapter-fit (PCA/PQ frozen parts), pretrain-id
(per seed, when fusion wants pretrained ID embeddings), train (per seed)
and evaluate (per seed). Each stage's artifact lives in the cache
directory under <stage>-<digest><suffix>, where the digest folds in the
digests of everything the stage depends on; unchanged stages are reused
across runs and experiments. Artifacts carry no timestamps, so a cache
hit and a forced recompute are bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import catalog as cat
from . import embedding_io as eio
from . import evaluation, fusion, seqrec
from .adapters import build_adapter_pipeline
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import RunConfig, _split_dotted
from .hashing import digest_file, digest_text

DEFAULT_CACHE_DIR = "semrec-cache"

BEST_CONFIG_OVERRIDES = {
    "data.text_source": "sac",
    "embedding.pooling": "mean",
    "adapter.architecture": "moe",
    "adapter.use_pca": "true",
    "fusion.strategy": "replace",
}


class StageError(RuntimeError):
    def __init__(self, stage, err):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage
        self.cause = err


class StageCache:
    """Artifact store keyed by stage name + dependency digest. Records a
    (stage, status, key) event per lookup so tests can assert the
    dependency graph."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.events = []

    def paths(self, stage, key, outputs):
        return {name: os.path.join(self.root, f"{stage}-{key}{suffix}")
                for name, suffix in outputs.items()}

    def get_or_build(self, stage, key, outputs, build):
        """Return artifact paths, invoking `build(paths)` on a miss. The
        builder must write every output atomically."""
        paths = self.paths(stage, key, outputs)
        if all(os.path.exists(p) for p in paths.values()):
            self.events.append((stage, "hit", key))
            return paths
        try:
            build(paths)
        except Exception as err:
            raise StageError(stage, err) from err
        missing = [p for p in paths.values() if not os.path.exists(p)]
        if missing:
            raise StageError(stage, f"builder did not produce {missing}")
        self.events.append((stage, "miss", key))
        return paths


def _canon(fields: dict) -> str:
    return ",".join(f"{k}={fields[k]}" for k in sorted(fields))


@dataclass
class ExperimentResult:
    config: RunConfig
    report: evaluation.MetricsReport
    checkpoints: dict                 # seed -> model checkpoint path
    stage_keys: dict = field(default_factory=dict)
    cache: StageCache | None = None


# ---------------------------------------------------------------------------
# stages


def _stage_ingest(cache: StageCache, config: RunConfig):
    catalog_path = config.catalog_path()
    interactions_path = config.interactions_path()
    enhanced = config.enhanced_text_path()
    parts = [digest_file(catalog_path), digest_file(interactions_path),
             str(config.min_length()), config.text_source()]
    if enhanced:
        parts.append(digest_file(enhanced))
    key = digest_text("|".join(parts))

    def build(paths):
        catalog = cat.load_catalog(catalog_path)
        if enhanced:
            texts = cat.load_enhanced_texts(enhanced, config.text_source(), catalog)
            catalog.set_texts(texts, config.text_source())
        dataset = cat.load_interactions(interactions_path, catalog,
                                        config.min_length())
        atomic_write(paths["bundle"],
                     cat.bundle_to_json(catalog, dataset).encode("utf-8"))

    paths = cache.get_or_build("ingest", key, {"bundle": ".json"}, build)
    with open(paths["bundle"], "r", encoding="utf-8") as f:
        catalog, dataset = cat.bundle_from_json(f.read())
    return key, catalog, cat.to_model_space(catalog, dataset)


def _stage_pool(cache: StageCache, config: RunConfig, ingest_key, catalog):
    token_path = config.tokens_path()
    pooling = config.pooling()
    key = digest_text("|".join([ingest_key, digest_file(token_path), pooling]))

    def build(paths):
        store = eio.read_token_embeddings(token_path)
        if len(store) != len(catalog):
            raise ValueError(f"token file has {len(store)} items, "
                             f"catalog has {len(catalog)}")
        table = eio.build_item_table(store, pooling)
        eio.write_item_embeddings(table, paths["table"])

    paths = cache.get_or_build("pool", key, {"table": ".rxeb"}, build)
    return key, eio.read_item_embeddings(paths["table"])


def _stage_adapter_fit(cache: StageCache, config: RunConfig, pool_key, table):
    spec = config.adapter_spec(input_dim=table.dim)
    fit_seed = config.fit_seed()
    canon = _canon({"architecture": spec.architecture, "d": spec.d,
                    "use_pca": spec.use_pca_preprocess, "d_pca": spec.d_pca,
                    "experts": spec.experts, "pq_m": spec.pq_m,
                    "pq_k": spec.pq_k, "pq_iters": spec.pq_iters,
                    "pq_restarts": spec.pq_restarts, "fit_seed": fit_seed})
    if not (spec.needs_pca or spec.architecture == "pq"):
        return spec, canon, None, None
    key = digest_text("|".join([pool_key, canon]))

    def build(paths):
        pipeline = build_adapter_pipeline(spec, table.rows,
                                          np.random.default_rng(0), fit_seed)
        save_checkpoint(pipeline.frozen_entries(), paths["ckpt"])

    paths = cache.get_or_build("adapter-fit", key, {"ckpt": ".ckpt"}, build)
    return spec, canon, key, load_checkpoint(paths["ckpt"])


def _stage_pretrain_id(cache: StageCache, config: RunConfig, ingest_key,
                       dataset, seed):
    """Pretrained ID table for one seed, or (None, tag) when the strategy
    does not use one."""
    spec = config.fusion_spec()
    sasrec_cfg = config.sasrec_config()
    explicit = config.id_checkpoint_path()
    if spec.strategy == "replace":
        return None, None, "none"
    if explicit:
        table = fusion.load_pretrained_ids(explicit, dataset.n_items, sasrec_cfg.d)
        return table, digest_file(explicit), digest_file(explicit)
    if config.id_origin() == "fresh":
        return None, None, "fresh"
    canon = _canon(vars(sasrec_cfg))
    key = digest_text("|".join([ingest_key, canon, str(seed)]))

    def build(paths):
        fusion.pretrain_id_table(dataset, sasrec_cfg, seed, out_path=paths["ckpt"])

    paths = cache.get_or_build("pretrain-id", key, {"ckpt": ".ckpt"}, build)
    table = fusion.load_pretrained_ids(paths["ckpt"], dataset.n_items, sasrec_cfg.d)
    return table, digest_file(paths["ckpt"]), key


def _stage_train(cache: StageCache, config: RunConfig, dataset, table, spec,
                 adapter_canon, adapter_key, frozen, seed, id_table, id_digest,
                 id_tag):
    fspec = config.fusion_spec()
    sasrec_cfg = config.sasrec_config()
    fusion_canon = _canon({"strategy": fspec.strategy,
                           "align_weight": fspec.align_weight,
                           "id_origin": config.id_origin()})
    key = digest_text("|".join([
        cache_key_or(adapter_key), adapter_canon, fusion_canon, id_tag,
        _canon(vars(sasrec_cfg)), str(seed)]))

    def build(paths):
        rng = np.random.default_rng((seed, 100))
        pipeline = build_adapter_pipeline(spec, table.rows, rng,
                                          config.fit_seed(), frozen_entries=frozen)
        source = fusion.build_source(fspec, pipeline, rng, pretrained=id_table,
                                     pretrained_digest=id_digest)
        model, history = seqrec.train(dataset, source, sasrec_cfg, seed,
                                      init_rng=rng)
        seqrec.save_model(paths["model"], model, source)
        atomic_write(paths["history"],
                     json.dumps(history, sort_keys=True).encode("utf-8"))

    paths = cache.get_or_build("train", key, {"model": ".ckpt",
                                              "history": ".json"}, build)
    return key, paths


def cache_key_or(key, fallback="-"):
    return key if key else fallback


def _rebuild_scorer(config: RunConfig, spec, table, entries):
    """Reconstruct model + source from checkpoint entries for scoring. The
    align anchor only shapes training, so align scores like replace."""
    fspec = config.fusion_spec()
    sasrec_cfg = config.sasrec_config()
    rng = np.random.default_rng(0)
    pipeline = build_adapter_pipeline(spec, table.rows, rng, config.fit_seed(),
                                      frozen_entries=entries)
    if fspec.strategy == "concat":
        source = fusion.ConcatSource(pipeline, rng)
    else:
        source = fusion.ReplaceSource(pipeline)
    model = seqrec.load_model(entries, sasrec_cfg, source)
    return seqrec.Scorer(model, source)


def _stage_evaluate(cache: StageCache, config: RunConfig, dataset, table, spec,
                    train_key, model_path, seed):
    key = digest_text("|".join([train_key, "test",
                                str(evaluation.N_NEGATIVES), "5,10", str(seed)]))

    def build(paths):
        entries = load_checkpoint(model_path)
        scorer = _rebuild_scorer(config, spec, table, entries)
        metrics, _ = evaluation.evaluate_split(dataset, scorer, seed, "test")
        payload = {"metrics": metrics,
                   "checkpoint_digest": digest_file(model_path)}
        atomic_write(paths["metrics"],
                     json.dumps(payload, sort_keys=True).encode("utf-8"))

    paths = cache.get_or_build("evaluate", key, {"metrics": ".json"}, build)
    with open(paths["metrics"], "r", encoding="utf-8") as f:
        return key, json.load(f)


# ---------------------------------------------------------------------------
# experiment / grid


def run_experiment(config: RunConfig, cache_dir=None, out_dir=None,
                   seeds=None) -> ExperimentResult:
    """Execute ingest -> pool -> fit -> (pretrain) -> train -> evaluate for
    every seed and assemble the metrics report."""
    out_dir = out_dir or config.out_dir()
    cache_dir = cache_dir or config.cache_dir() or DEFAULT_CACHE_DIR
    seeds = tuple(seeds) if seeds else config.seeds()
    cache = StageCache(cache_dir)

    ingest_key, catalog, dataset = _stage_ingest(cache, config)
    pool_key, table = _stage_pool(cache, config, ingest_key, catalog)
    spec, adapter_canon, adapter_key, frozen = _stage_adapter_fit(
        cache, config, pool_key, table)
    adapter_canon = "|".join([pool_key, adapter_canon])

    per_seed = {}
    checkpoints = {}
    ckpt_digests = {}
    stage_keys = {"ingest": ingest_key, "pool": pool_key,
                  "adapter-fit": adapter_key, "train": {}, "evaluate": {},
                  "pretrain-id": {}}
    for seed in seeds:
        id_table, id_digest, id_tag = _stage_pretrain_id(
            cache, config, ingest_key, dataset, seed)
        stage_keys["pretrain-id"][seed] = id_tag
        train_key, train_paths = _stage_train(
            cache, config, dataset, table, spec, adapter_canon, adapter_key,
            frozen, seed, id_table, id_digest, id_tag)
        stage_keys["train"][seed] = train_key
        eval_key, payload = _stage_evaluate(
            cache, config, dataset, table, spec, train_key,
            train_paths["model"], seed)
        stage_keys["evaluate"][seed] = eval_key
        per_seed[seed] = payload["metrics"]
        checkpoints[seed] = train_paths["model"]
        ckpt_digests[str(seed)] = payload["checkpoint_digest"]

    report = evaluation.MetricsReport(
        seeds=seeds, per_seed=per_seed,
        provenance={"config_digest": config.digest,
                    "dataset_digest": ingest_key,
                    "checkpoint_digests": ckpt_digests,
                    "config_text": config.canonical_text()})
    report.validate()
    if out_dir:
        write_report(out_dir, config, report)
    return ExperimentResult(config=config, report=report,
                            checkpoints=checkpoints, stage_keys=stage_keys,
                            cache=cache)


def write_report(out_dir, config: RunConfig, report: evaluation.MetricsReport):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "report.txt"),
                 report.render().encode("utf-8"))
    atomic_write(os.path.join(out_dir, "report.jsonl"),
                 ("\n".join(report.to_records()) + "\n").encode("utf-8"))
    atomic_write(os.path.join(out_dir, "resolved.cfg"),
                 config.canonical_text().encode("utf-8"))


@dataclass
class GridResult:
    axis: str
    values: list
    results: list                     # ExperimentResult per value
    table: str


def run_grid(config: RunConfig, axis: str, values, cache_dir=None,
             out_dir=None, seeds=None) -> GridResult:
    """One experiment per axis value plus a comparison table. The best
    cell per metric is wrapped in ``*`` and the second best in ``_``."""
    _split_dotted(axis)
    values = list(values)
    if not values:
        raise ValueError("grid needs at least one value")
    results = []
    for value in values:
        sub_config = config.with_value(axis, value)
        sub_out = None
        if out_dir:
            sub_out = os.path.join(out_dir, f"{axis.replace('.', '-')}-{value}")
        results.append(run_experiment(sub_config, cache_dir=cache_dir,
                                      out_dir=sub_out, seeds=seeds))
    table = _comparison_table(axis, values, [r.report for r in results])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write(os.path.join(out_dir, "grid.txt"), table.encode("utf-8"))
    return GridResult(axis=axis, values=values, results=results, table=table)


def _comparison_table(axis, values, reports) -> str:
    names = evaluation.metric_names(reports[0].k_values)
    header = ["metric"] + [str(v) for v in values]
    rows = [header]
    for m in names:
        means = [r.mean[m] for r in reports]
        best = max(means)
        rest = [v for v in means if v != best]
        second = max(rest) if rest else None
        cells = [m]
        for v in means:
            text = f"{v:.4f}"
            if v == best:
                text = f"*{text}*"
            elif second is not None and v == second:
                text = f"_{text}_"
            cells.append(text)
        rows.append(cells)
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = [f"axis: {axis}"]
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def best_config(base: RunConfig) -> RunConfig:
    """The best-performing composition: mean pooling, MoE adapter with PCA
    pre-processing, direct replacement fusion, plain attribute-sentence
    text. Dataset paths and SASRec settings come from `base`."""
    config = base
    for dotted, value in BEST_CONFIG_OVERRIDES.items():
        config = config.with_value(dotted, value)
    return config
