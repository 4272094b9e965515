"""Command-line entry points for the pipeline stages and experiment runner."""

from __future__ import annotations

import argparse
import shutil
import sys

from . import fusion, runner, synthetic
from .config import RunConfig


def _add_common(parser, seed=False, out=False):
    parser.add_argument("--config", required=True, help="run config file")
    parser.add_argument("--cache-dir", default=None, help="stage cache directory")
    if seed:
        parser.add_argument("--seed", type=int, default=None,
                            help="single seed (default: first of run.seeds)")
    if out:
        parser.add_argument("--out", default=None, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semrec",
        description="Semantic-embedding sequential recommendation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the bundled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--dim", type=int, default=128)

    _add_common(sub.add_parser("ingest", help="load and cache the dataset bundle"))
    _add_common(sub.add_parser("pool", help="pool token embeddings into an item table"))
    _add_common(sub.add_parser("fit-adapter", help="fit the frozen adapter parts"))
    _add_common(sub.add_parser("pretrain-id", help="pretrain an ID-only model"),
                seed=True, out=True)
    _add_common(sub.add_parser("train", help="train one seed"), seed=True, out=True)
    _add_common(sub.add_parser("evaluate", help="evaluate all seeds and write a report"),
                out=True)
    _add_common(sub.add_parser("run", help="full pipeline: train + evaluate all seeds"),
                out=True)

    p = sub.add_parser("grid", help="vary one config key and compare")
    _add_common(p, out=True)
    p.add_argument("--axis", required=True, help="config key, e.g. embedding.pooling")
    p.add_argument("--values", required=True, help="comma-separated axis values")

    p = sub.add_parser("best-config", help="emit the best-performing composition")
    p.add_argument("--config", required=True, help="base config (dataset paths)")
    p.add_argument("--out", default=None, help="where to write the composed config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-synthetic":
        paths = synthetic.generate(args.out, n_items=args.items,
                                   n_users=args.users, n_clusters=args.clusters,
                                   dim=args.dim, seed=args.seed)
        for name in sorted(paths):
            print(f"{name}: {paths[name]}")
        return 0

    config = RunConfig.load(args.config)
    cache_dir = getattr(args, "cache_dir", None)

    if args.command == "ingest":
        cache = runner.StageCache(cache_dir or config.cache_dir()
                                  or runner.DEFAULT_CACHE_DIR)
        key, catalog, dataset = runner._stage_ingest(cache, config)
        print(f"ingest {key}: {len(catalog)} items, {len(dataset.users)} users")
        return 0

    if args.command == "pool":
        cache = runner.StageCache(cache_dir or config.cache_dir()
                                  or runner.DEFAULT_CACHE_DIR)
        ingest_key, catalog, _ = runner._stage_ingest(cache, config)
        key, table = runner._stage_pool(cache, config, ingest_key, catalog)
        print(f"pool {key}: {len(table)} x {table.dim} ({config.pooling()})")
        return 0

    if args.command == "fit-adapter":
        cache = runner.StageCache(cache_dir or config.cache_dir()
                                  or runner.DEFAULT_CACHE_DIR)
        ingest_key, catalog, _ = runner._stage_ingest(cache, config)
        pool_key, table = runner._stage_pool(cache, config, ingest_key, catalog)
        spec, _, key, frozen = runner._stage_adapter_fit(cache, config, pool_key, table)
        if key is None:
            print(f"adapter {spec.architecture}: no frozen parts to fit")
        else:
            print(f"adapter-fit {key}: {sorted(frozen)}")
        return 0

    if args.command == "pretrain-id":
        seed = args.seed if args.seed is not None else config.seeds()[0]
        cache = runner.StageCache(cache_dir or config.cache_dir()
                                  or runner.DEFAULT_CACHE_DIR)
        _, _, dataset = runner._stage_ingest(cache, config)
        table, _ = fusion.pretrain_id_table(dataset, config.sasrec_config(), seed,
                                            out_path=args.out)
        print(f"pretrained ID table: {table.shape[0] - 1} items, d={table.shape[1]}"
              + (f" -> {args.out}" if args.out else ""))
        return 0

    if args.command == "train":
        seed = args.seed if args.seed is not None else config.seeds()[0]
        result = runner.run_experiment(config, cache_dir=cache_dir, seeds=[seed])
        path = result.checkpoints[seed]
        if args.out:
            shutil.copyfile(path, args.out)
            path = args.out
        for m, v in result.report.per_seed[seed].items():
            print(f"seed {seed} {m}: {v:.4f}")
        print(f"checkpoint: {path}")
        return 0

    if args.command in ("run", "evaluate"):
        result = runner.run_experiment(config, cache_dir=cache_dir,
                                       out_dir=args.out)
        print(result.report.render(), end="")
        return 0

    if args.command == "grid":
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        grid = runner.run_grid(config, args.axis, values, cache_dir=cache_dir,
                               out_dir=args.out)
        print(grid.table, end="")
        return 0

    if args.command == "best-config":
        best = runner.best_config(config)
        text = best.canonical_text()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        print(text, end="")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
