"""Command-line entry point: prepare | train | generate | evaluate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import (
    CategoryMap,
    DataError,
    DatasetBundle,
    ToyImageSource,
    load_records,
    load_vqa,
    make_toy_dataset,
    save_records,
    split,
)
from .inference import generate_records
from .losses import TrainingError
from .metrics import evaluate, read_records, write_records
from .training import train

CACHE_BASENAME = "samples.rec"


def _add_common(parser):
    parser.add_argument("--config", help="TOML config file (defaults used if omitted)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--toy", action="store_true",
                        help="use the built-in synthetic shapes dataset")
    parser.add_argument("--data-dir", help="prepared sample cache (file or directory)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cyclevqg",
        description="Category-conditioned visual question generation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest VQA-format JSON into a sample cache")
    _add_common(p)
    p.add_argument("--categories", required=True,
                   help="answer-to-category TSV (answer<TAB>category per line)")
    p.add_argument("--out", required=True, help="output cache path")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--out", default="model.ckpt", help="checkpoint output path")

    p = sub.add_parser("generate", help="decode questions for every image x category")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output JSONL of generation records")
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="score a generations file")
    _add_common(p)
    p.add_argument("generations", help="line-delimited JSON generation records")
    p.add_argument("--out", required=True, help="report path prefix (.json/.txt added)")
    return parser


def _load_config(args):
    cfg = config_mod.from_file(args.config) if args.config else config_mod.Config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed)
        )
    return cfg


def _cache_path(data_dir):
    if os.path.isdir(data_dir):
        return os.path.join(data_dir, CACHE_BASENAME)
    return data_dir


def _load_dataset(args, cfg):
    if args.toy:
        samples, vocab, category_map = make_toy_dataset(
            cfg.data.toy_images, cfg.data.toy_categories, cfg.train.seed
        )
        return DatasetBundle(
            samples, vocab, category_map.names, ToyImageSource(size=cfg.model.image_size)
        )
    if args.data_dir:
        return load_records(_cache_path(args.data_dir), image_size=cfg.model.image_size)
    raise DataError("no dataset given: pass --toy or --data-dir")


def cmd_prepare(args):
    cfg = _load_config(args)
    if not args.data_dir:
        raise DataError("prepare needs --data-dir with questions.json and annotations.json")
    category_map = CategoryMap.from_tsv(args.categories)
    result = load_vqa(
        os.path.join(args.data_dir, "annotations.json"),
        os.path.join(args.data_dir, "questions.json"),
        category_map,
        min_token_freq=cfg.data.min_token_freq,
        max_len=cfg.model.max_len,
    )
    save_records(
        args.out, result.samples, result.vocab, category_map.names,
        image_mode="path", image_root=args.data_dir,
    )
    r = result.report
    print(f"questions read     {r.total_questions}")
    print(f"samples kept       {r.kept}")
    print(f"unmapped answers   {r.unmapped_answers}")
    print(f"malformed records  {r.malformed}")
    print(f"vocabulary size    {len(result.vocab)}")
    print(f"cache written to   {args.out}")
    return 0


def cmd_train(args):
    if args.checkpoint:
        loaded = load_checkpoint(args.checkpoint)
        cfg, state = loaded.config, loaded.state
        if args.seed is not None:
            raise ConfigError("--seed cannot override a resumed checkpoint's seed")
        dataset = _load_dataset(args, cfg)
        if dataset.vocab != loaded.vocab:
            raise DataError("dataset vocabulary differs from the checkpoint's")
    else:
        cfg = _load_config(args)
        state = None
        dataset = _load_dataset(args, cfg)

    parts = split(dataset.samples, cfg.data.split_ratio, cfg.train.seed)
    train_bundle = DatasetBundle(
        parts.train, dataset.vocab, dataset.category_names, dataset.images
    )
    state = train(
        train_bundle, cfg.train, cfg.loss, cfg.model, state=state, log=print
    )
    bound = dataclasses.replace(
        cfg, model=dataclasses.replace(
            cfg.model, vocab_size=len(dataset.vocab),
            n_categories=len(dataset.category_names),
        )
    )
    save_checkpoint(state, args.out, bound, dataset.vocab, dataset.category_names)
    final = state.history[-1].total if state.history else float("nan")
    print(f"final loss {final:.6f} after {state.epoch} epochs ({state.step} steps)")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_generate(args):
    loaded = load_checkpoint(args.checkpoint)
    cfg = loaded.config
    dataset = _load_dataset(args, cfg)
    if dataset.vocab != loaded.vocab:
        raise DataError("dataset vocabulary differs from the checkpoint's")
    parts = split(dataset.samples, cfg.data.split_ratio, cfg.train.seed)
    seed = args.seed if args.seed is not None else cfg.train.seed
    records = generate_records(
        loaded.state.model, parts.val, dataset.images, dataset.vocab,
        mode=args.mode, seed=seed, temperature=args.temperature,
        max_len=cfg.model.max_len,
    )
    write_records(args.out, records)
    print(f"wrote {len(records)} generation records to {args.out}")
    return 0


def cmd_evaluate(args):
    records = read_records(args.generations)
    training_questions = []
    category_names = None
    if args.toy or args.data_dir:
        cfg = _load_config(args)
        dataset = _load_dataset(args, cfg)
        parts = split(dataset.samples, cfg.data.split_ratio, cfg.train.seed)
        training_questions = [dataset.vocab.decode(s.question) for s in parts.train]
        category_names = dataset.category_names
    report = evaluate(records, training_questions, category_names=category_names)
    scaled = report.as_dict(scaled=True)
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        json.dump(scaled, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(args.out + ".txt", "w", encoding="utf-8") as fh:
        fh.write(report.table())
        fh.write("\n")
    for n in (1, 2, 3, 4):
        print(f"BLEU-{n} {scaled['bleu'][str(n)]:.2f}")
    print(f"ROUGE-L {scaled['rouge_l']:.2f}")
    print(f"CIDEr {scaled['cider']:.2f}")
    print(f"METEOR {scaled['meteor']:.2f}")
    print(f"strength {scaled['strength']:.2f}")
    print(f"inventiveness {scaled['inventiveness']:.2f}")
    print(f"report written to {args.out}.json and {args.out}.txt")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, CheckpointError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
