"""Command-line entry points.

Machine-readable results go to stdout; logs go to stderr.  Exit codes:
0 success, 1 runtime failure, 2 flag errors (argparse).  Every
TrainerConfig field can come from a YAML config file (--config) and be
overridden by the matching flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evalsuite, gradchecks
from .corpus import (
    DEFAULT_STYLE_NAMES,
    StyleRegistry,
    SyntheticCorpusSpec,
    load_corpus,
    save_corpus,
    split_corpus,
    synth_corpus,
)
from .index import build_index, load_index, save_index
from .prompts import load_bank
from .server import resolve_port, run_query
from .trainer import Checkpoint, TrainerConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Trainer config plumbing
# ---------------------------------------------------------------------------

def _flag_name(field_name: str) -> str:
    return "--" + field_name.replace("_", "-")


def add_trainer_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("trainer config overrides")
    group.add_argument("--config", type=Path, help="YAML file with TrainerConfig fields")
    for f in dataclasses.fields(TrainerConfig):
        if f.type == "bool":
            group.add_argument(
                _flag_name(f.name), dest=f.name, default=None,
                action=argparse.BooleanOptionalAction,
            )
        else:
            caster = {"int": int, "float": float, "str": str}[f.type]
            group.add_argument(_flag_name(f.name), dest=f.name, type=caster, default=None)


def build_trainer_config(args: argparse.Namespace) -> TrainerConfig:
    values = {}
    if getattr(args, "config", None):
        doc = yaml.safe_load(Path(args.config).read_text("utf-8")) or {}
        known = {f.name for f in dataclasses.fields(TrainerConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for f in dataclasses.fields(TrainerConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return TrainerConfig(**values)


def _split(corpus, seed: int):
    return split_corpus(corpus, (0.8, 0.1, 0.1), seed)


def _pick_split(corpus, which: str, seed: int):
    if which == "all":
        return corpus
    train_c, val_c, test_c = _split(corpus, seed)
    return {"train": train_c, "val": val_c, "test": test_c}[which]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    names = DEFAULT_STYLE_NAMES[: args.num_styles]
    spec = SyntheticCorpusSpec(
        styles=StyleRegistry(tuple(names)),
        utterances_per_style=args.per_style,
        duration_range_s=(args.min_duration, args.max_duration),
        separability=args.separability,
        seed=args.seed,
    )
    corpus = synth_corpus(spec)
    manifest = save_corpus(corpus, args.out)
    logger.info("wrote %d utterances to %s", len(corpus), args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = build_trainer_config(args)
    corpus, _ = load_corpus(args.corpus)
    bank = load_bank(args.bank)
    train_c, val_c, _ = _split(corpus, args.split_seed)
    result = train(config, train_c, val_c, bank)
    save_checkpoint(args.out, result.best)
    logger.info(
        "best epoch %d (val loss %.6f); checkpoint %s",
        result.best.epoch, result.best.val_loss, args.out,
    )
    print(args.out)
    return 0


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.ckpt, load_bank(args.bank))
    corpus, paths = load_corpus(args.corpus)
    subset = _pick_split(corpus, args.split, args.split_seed)
    index = build_index(ckpt.bundle, subset, paths)
    save_index(index, args.out)
    logger.info("indexed %d rows (d=%d) into %s", len(index), index.d, args.out)
    print(args.out)
    return 0


def cmd_query(args) -> int:
    bank = load_bank(args.bank)
    ckpt = load_checkpoint(args.ckpt, bank)
    index = load_index(args.index)
    hits = run_query(index, ckpt.bundle, args.text, args.k, args.threshold)
    for hit in hits:
        print(f"{hit.id}\t{hit.score:.6f}")
    return 0


def cmd_eval(args) -> int:
    bank = load_bank(args.bank)
    ckpt = load_checkpoint(args.ckpt, bank)
    corpus, paths = load_corpus(args.corpus)
    subset = _pick_split(corpus, args.split, args.split_seed)
    if args.index:
        index = load_index(args.index)
    else:
        index = build_index(ckpt.bundle, subset, paths)
    report = evalsuite.evaluate(
        index, ckpt.bundle, bank, subset,
        n_trials=args.trials, n_distractors=args.distractors, seed=args.seed,
    )
    doc = evalsuite.report_to_json(report)
    if args.out:
        Path(args.out).write_text(doc, "utf-8")
    print(doc)
    print(evalsuite.report_table(report), file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    bank = load_bank(args.bank)
    ckpt = load_checkpoint(args.ckpt, bank)
    index = load_index(args.index)
    app = create_app(index, ckpt.bundle, bank, args.clip_root, args.static)
    uvicorn.run(app, host=args.host, port=resolve_port(args.port))
    return 0


def cmd_gradcheck(args) -> int:
    checks = gradchecks.run_all_checks(args.seed)
    failed = 0
    for name, err in checks.items():
        ok = err < gradchecks.TOLERANCE
        failed += not ok
        print(f"{name}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    if failed:
        logger.error("%d gradient checks failed", failed)
        return 1
    return 0


def cmd_dump_embeddings(args) -> int:
    index = load_index(args.index)
    bundle = bank = None
    if args.include_text:
        if not args.ckpt:
            raise ValueError("--include-text requires --ckpt")
        bank = load_bank(args.bank)
        bundle = load_checkpoint(args.ckpt, bank).bundle
    count = evalsuite.dump_embeddings(index, args.out, bundle, bank)
    logger.info("dumped %d embeddings to %s", count, args.out)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylesearch",
        description="Train, index, and query expressive speech by style description.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-styles", type=int, default=len(DEFAULT_STYLE_NAMES))
    p.add_argument("--per-style", type=int, default=60)
    p.add_argument("--min-duration", type=float, default=1.0)
    p.add_argument("--max-duration", type=float, default=12.0)
    p.add_argument("--separability", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train encoders on a labeled corpus")
    p.add_argument("--corpus", type=Path, required=True, help="corpus dir or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="checkpoint output path")
    p.add_argument("--bank", type=Path, default=None, help="prompt bank JSON (default: packaged)")
    p.add_argument("--split-seed", type=int, default=0)
    add_trainer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="build an embedding index from a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("query", help="retrieve clips for a free-form style description")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--text", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="run the retrieval-trial evaluation protocol")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--index", type=Path, default=None, help="reuse a saved index")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--distractors", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP retrieval service")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--clip-root", type=Path, default=None)
    p.add_argument("--static", type=Path, default=None, help="UI bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None, help="overrides STYLESEARCH_PORT")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-embeddings", help="export embeddings as TSV")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--include-text", action="store_true")
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--bank", type=Path, default=None)
    p.set_defaults(func=cmd_dump_embeddings)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
