"""Command-line pipeline: synth | build-graph | labels | pretrain | eval | graph-stats.

Every stage is config-driven and seeded; artifacts embed the producing
config hash and later stages refuse inputs with a different hash unless
--force is given. Output bytes are independent of --threads. Set
PKGFORGE_LOG=INFO (or DEBUG) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus_io, downstream, graph as graph_mod, labeler, synthgen, trainer
from .config import PipelineConfig, synthetic_preset

log = logging.getLogger("pkgforge")


class CliError(RuntimeError):
    pass


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    p.add_argument(
        "--preset",
        choices=["paper", "synthetic"],
        default="paper",
        help="base config before --config/flag overrides (default: paper constants)",
    )
    p.add_argument("--seed", type=int, default=None, help="override the pipeline seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker thread cap")
    p.add_argument("--force", action="store_true", help="skip config-hash consistency checks")


def _graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--dedup-threshold", type=float, default=None,
        help="single-linkage cosine distance threshold (default 0.09)",
    )
    p.add_argument(
        "--match-threshold", type=float, default=None,
        help="segment/headline dot-product match threshold (default 10)",
    )
    p.add_argument(
        "--instance-threshold", type=float, default=None,
        help="corpus transition aggregate prune threshold (default 1000)",
    )
    p.add_argument(
        "--pool-factor", type=int, default=None,
        help="mean-pool this many consecutive segment features on load "
        "(default 1; use 3 to coarsen 3.2 s features to 9.6 s segments)",
    )


def _resolve_config(args) -> PipelineConfig:
    noise = getattr(args, "noise", None)
    if args.config is not None:
        if noise:
            raise CliError("--noise cannot be combined with --config")
        cfg = PipelineConfig.load(args.config)
    elif args.preset == "synthetic" or noise:
        cfg = synthetic_preset(noise=noise or "low")
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.__post_init__()
    for flag, attr in (
        ("dedup_threshold", "dedup_threshold"),
        ("match_threshold", "match_threshold"),
        ("instance_threshold", "instance_threshold"),
        ("pool_factor", "pool_factor"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "lr", None) is not None:
        cfg.train.learning_rate = args.lr
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    if getattr(args, "max_epochs", None) is not None:
        cfg.train.max_epochs = args.max_epochs
        cfg.downstream.max_epochs = args.max_epochs
    if getattr(args, "objectives", None):
        cfg.train.objectives = tuple(args.objectives.split(","))
        cfg.train.__post_init__()
    return cfg


def _check_hash(artifact_hash: str | None, cfg: PipelineConfig, what: str, force: bool) -> None:
    if force or artifact_hash is None:
        return
    if artifact_hash != cfg.config_hash():
        raise CliError(
            f"{what} was produced under config hash {artifact_hash}, current is "
            f"{cfg.config_hash()}; rerun with the matching config or pass --force"
        )


def _load_world(world: Path, pool_factor: int):
    db = corpus_io.load_step_database(world / "steps.jsonl")
    corpus = corpus_io.load_segment_corpus(world / "manifest.jsonl")
    if pool_factor > 1:
        for video in corpus.videos:
            video.segments = corpus_io.pool_segments(video.segments, pool_factor)
    return db, corpus


def _emit(obj: dict, out: Path | None) -> None:
    text = corpus_io.canonical_json(obj) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = _resolve_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    truth, db, corpus = synthgen.generate(cfg.world)
    corpus_io.save_step_database(db, out / "steps.jsonl")
    corpus_io.save_segment_corpus(corpus, out)
    synthgen.save_truth(truth, out / "truth.json", config_hash=cfg.config_hash())
    downstream.save_annotations(truth.annotations, out / "downstream_labels.jsonl")
    log.info(
        "world: %d tasks, %d steps, %d videos, %d segments",
        cfg.world.n_tasks, truth.n_steps, len(corpus.videos), corpus.num_segments,
    )
    _emit(
        {
            "world": str(out),
            "num_steps": truth.n_steps,
            "num_headlines": db.num_headlines,
            "num_videos": len(corpus.videos),
            "num_segments": corpus.num_segments,
            "config_hash": cfg.config_hash(),
        },
        None,
    )


def cmd_build_graph(args) -> None:
    cfg = _resolve_config(args)
    truth_path = args.world / "truth.json"
    if truth_path.exists():
        with open(truth_path, encoding="utf-8") as fh:
            _check_hash(json.load(fh).get("config_hash"), cfg, str(truth_path), args.force)
    db, corpus = _load_world(args.world, cfg.pool_factor)
    pkg = graph_mod.build_graph(
        db,
        corpus,
        dedup_threshold=cfg.dedup_threshold,
        match_threshold=cfg.match_threshold,
        instance_threshold=cfg.instance_threshold,
        threads=args.threads,
        config_hash=cfg.config_hash(),
    )
    graph_mod.save_graph(pkg, args.out)
    _emit(graph_mod.graph_stats(pkg), None)


def cmd_labels(args) -> None:
    cfg = _resolve_config(args)
    db, corpus = _load_world(args.world, cfg.pool_factor)
    pkg = graph_mod.load_graph(args.graph)
    _check_hash(pkg.config_hash, cfg, str(args.graph), args.force)
    header, records = labeler.emit_labels(
        corpus, db, pkg, config=cfg.labels, threads=args.threads
    )
    labeler.save_labels(header, records, args.out)
    _emit({k: header[k] for k in ("num_segments", "num_nodes", "config_hash")}, None)


def cmd_pretrain(args) -> None:
    cfg = _resolve_config(args)
    db, corpus = _load_world(args.world, cfg.pool_factor)
    header, records = labeler.load_labels(args.labels)
    _check_hash(header.get("config_hash"), cfg, str(args.labels), args.force)

    expected = [(v.video_id, i) for v in corpus.videos for i in range(v.segments.shape[0])]
    got = [(r.video_id, r.segment_index) for r in records]
    if expected != got:
        raise CliError("labels file does not line up with the corpus segment order")

    features = np.vstack([v.segments for v in corpus.videos if v.segments.shape[0]])
    video_of = np.concatenate(
        [np.full(v.segments.shape[0], i) for i, v in enumerate(corpus.videos)]
        or [np.zeros(0, dtype=np.int64)]
    )
    specs = trainer.head_specs_from_header(header, cfg.train.objectives, cfg.train.nrl_hops)
    targets = trainer.targets_from_labels(header, records, specs)
    ckpt, history = trainer.train(
        features, video_of, header, targets, cfg.train, config_hash=cfg.config_hash()
    )
    corpus_io.save_checkpoint(ckpt, args.out)
    with open(str(args.out) + ".history.json", "w", encoding="utf-8") as fh:
        fh.write(corpus_io.canonical_json(history) + "\n")
    _emit(
        {
            "checkpoint": str(args.out),
            "epochs": len(history["train_loss"]),
            "final_train_loss": history["train_loss"][-1],
            "config_hash": cfg.config_hash(),
        },
        None,
    )


def cmd_eval(args) -> None:
    cfg = _resolve_config(args)
    if cfg.pool_factor > 1:
        raise CliError("eval requires pool_factor=1: step annotations index unpooled segments")
    db, corpus = _load_world(args.world, 1)
    annotations = downstream.load_annotations(args.world / "downstream_labels.jsonl")

    sources = ["raw", "adapter"] if args.features == "both" else [args.features]
    transforms = {}
    if "raw" in sources:
        transforms["raw"] = None
    if "adapter" in sources:
        if args.checkpoint is None:
            raise CliError("--checkpoint is required for adapter features")
        ckpt = corpus_io.load_checkpoint(args.checkpoint)
        _check_hash(ckpt.metadata.get("config_hash"), cfg, str(args.checkpoint), args.force)
        adapter = trainer.adapter_from_checkpoint(ckpt)
        transforms["adapter"] = lambda feats: trainer.apply_adapter(adapter, feats)

    kinds = (
        [downstream.TASK_RECOGNITION, downstream.STEP_RECOGNITION, downstream.STEP_FORECASTING]
        if args.task == "all"
        else [args.task]
    )
    reports = []
    for source in sources:
        for kind in kinds:
            splits = downstream.build_downstream_dataset(
                corpus, annotations, kind, cfg.downstream, transform=transforms[source]
            )
            model, _ = downstream.train_downstream(splits, db.dim, cfg.downstream)
            accuracy = downstream.evaluate(model, splits.test)
            reports.append(
                {
                    "task": kind,
                    "accuracy": accuracy,
                    "n_test": len(splits.test),
                    "seed": cfg.seed,
                    "feature_source": source,
                    "config_hash": cfg.config_hash(),
                }
            )
            log.info("%s/%s accuracy %.4f", source, kind, accuracy)
    _emit({"config_hash": cfg.config_hash(), "reports": reports}, args.out)


def cmd_graph_stats(args) -> None:
    pkg = graph_mod.load_graph(args.graph)
    stats = graph_mod.graph_stats(pkg)
    if args.dot is not None:
        nodes = [int(n) for n in args.nodes.split(",")] if args.nodes else None
        args.dot.write_text(graph_mod.export_dot(pkg, nodes, args.hops), encoding="utf-8")
    _emit(stats, args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pkgforge",
        description="Procedural knowledge graph pipeline: build, pseudo-label, "
        "pretrain the feature adapter, and evaluate downstream.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world directory")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True, help="world output directory")
    p.add_argument(
        "--noise", choices=["zero", "low", "high"], default=None,
        help="noise preset override for the synthetic world",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="dedup steps, match segments, assemble the graph")
    _common_flags(p)
    _graph_flags(p)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="graph.json output path")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("labels", help="emit pseudo labels (vnm/vtm/tcl/nrl/vsm)")
    _common_flags(p)
    _graph_flags(p)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="labels.jsonl output path")
    p.add_argument(
        "--vnm-top-k", type=int, default=None,
        help="matched nodes per segment (default 3; top-5/3 neighbors per NRL hop)",
    )
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("pretrain", help="train the adapter and answer heads")
    _common_flags(p)
    _graph_flags(p)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint output path")
    p.add_argument("--objectives", default=None, help="comma list, e.g. vnm,vtm_db,nrl")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 256)")
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream TR/SR/SF accuracy, raw vs adapter features")
    _common_flags(p)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--task", choices=["TR", "SR", "SF", "all"], default="all")
    p.add_argument("--features", choices=["raw", "adapter", "both"], default="both")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("graph-stats", help="graph statistics and optional DOT export")
    _common_flags(p)
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--dot", type=Path, default=None, help="write a DOT rendering here")
    p.add_argument("--nodes", default=None, help="comma list of node ids to center the DOT on")
    p.add_argument("--hops", type=int, default=1, help="neighborhood radius for --dot")
    p.set_defaults(func=cmd_graph_stats)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("PKGFORGE_LOG", "WARNING").upper(), logging.WARNING)
    )
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, corpus_io.CorpusFormatError, ValueError, OSError) as exc:
        sys.stderr.write(corpus_io.canonical_json({"error": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
