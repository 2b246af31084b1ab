"""Command-line entry point.

Subcommands cover dataset/model plumbing (gen-data, train-predictor,
train-canon, export-logits) and the four reproducible studies (run-robustness,
run-group-map, run-double-shift, run-coverage-sanity).  Exit codes: 0 success,
2 configuration error, 3 training failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import ExperimentConfig, load_config
from .data import generate_glyphs, load_dataset, save_dataset
from .errors import ConfigError, FormatError, TrainingError
from .experiments import run_study
from .groups import CyclicGroup
from .models import (
    export_logits,
    load_classifier,
    save_canonicalizer,
    save_classifier,
    train_canonicalizer,
    train_classifier,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geocp",
        description="Conformal prediction under rotation-group shifts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config: bool):
        p.add_argument("--config", required=needs_config, help="JSON config file")
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--seed", type=int, help="override the config base seed")
        p.add_argument("--trials", type=int, help="override the config trial count")
        p.add_argument("--threads", type=int, default=1, help="parallel trial workers")

    p = sub.add_parser("gen-data", help="write a glyph dataset container")
    common(p, needs_config=False)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--split", default="calibration")

    p = sub.add_parser("train-predictor", help="train the classifier and save it")
    common(p, needs_config=True)
    p.add_argument("--data", help="optional dataset container to train on")

    p = sub.add_parser("train-canon", help="train the canonicalizer and save it")
    common(p, needs_config=True)
    p.add_argument("--group", type=int, help="override the group order")
    p.add_argument("--data", help="optional dataset container to train on")

    p = sub.add_parser("export-logits", help="export classifier logits for a dataset")
    common(p, needs_config=False)
    p.add_argument("--model", required=True, help="saved classifier (.npz)")
    p.add_argument("--data", required=True, help="dataset container (.cp2t)")

    for study in ("robustness", "group-map", "double-shift", "coverage-sanity"):
        p = sub.add_parser(f"run-{study}", help=f"run the {study} study")
        common(p, needs_config=True)

    return parser


def _load_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        updates["trials"] = args.trials
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _out_or(cfg_out: str | None, arg_out: str | None, fallback: str) -> str:
    return arg_out or cfg_out or fallback


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    count, classes, side = args.count, args.classes, args.side
    if args.config:
        cfg = load_config(args.config)
        count = args.count if args.count != 500 else cfg.data.calibration
        classes = args.classes if args.classes != 4 else cfg.data.classes
        side = args.side if args.side != 32 else cfg.data.side
        if args.seed is None:
            seed = cfg.seed
    if not args.out:
        raise ConfigError("gen-data needs --out FILE")
    dataset = generate_glyphs(seed, count, classes, side).with_split(args.split)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples ({classes} classes, side {side}) to {args.out}")
    return EXIT_OK


def _cmd_train_predictor(args) -> int:
    cfg = _load_with_overrides(args)
    out = _out_or(None, args.out, "classifier.npz")
    if args.data:
        dataset = load_dataset(args.data, split="predictor-train")
    else:
        dataset = generate_glyphs(
            cfg.seed * 1000 + 901, cfg.data.train, cfg.data.classes, cfg.data.side
        )
    clf = train_classifier(
        dataset,
        cfg.predictor.train_config(),
        arch=cfg.predictor.arch,
        hidden=cfg.predictor.hidden,
    )
    save_classifier(clf, out)
    print(f"trained classifier (train accuracy {clf.train_accuracy:.4f}) -> {out}")
    return EXIT_OK


def _cmd_train_canon(args) -> int:
    cfg = _load_with_overrides(args)
    out = _out_or(None, args.out, "canonicalizer.npz")
    order = args.group
    if order is None:
        order = cfg.extra.get("group", 4) if cfg.study in ("group-map", "double-shift") else 4
    if args.data:
        dataset = load_dataset(args.data, split="canon-train")
    else:
        dataset = generate_glyphs(
            cfg.seed * 1000 + 902, cfg.data.canon, cfg.data.classes, cfg.data.side
        ).with_split("canon-train")
    cn = train_canonicalizer(
        dataset,
        CyclicGroup(order),
        cfg.canonicalizer.train_config(),
        arch=cfg.canonicalizer.arch,
        hidden=cfg.canonicalizer.hidden,
        temperature=cfg.canonicalizer.temperature,
    )
    save_canonicalizer(cn, out)
    print(f"trained canonicalizer (group order {order}) -> {out}")
    return EXIT_OK


def _cmd_export_logits(args) -> int:
    if not args.out:
        raise ConfigError("export-logits needs --out FILE")
    clf = load_classifier(args.model)
    dataset = load_dataset(args.data)
    export_logits(clf, dataset, args.out)
    print(f"wrote logits for {len(dataset)} samples to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _load_with_overrides(args)
    study = args.command[len("run-") :]
    if cfg.study != study:
        raise ConfigError(
            f"config declares study {cfg.study!r} but the command requests {study!r}"
        )
    out_dir = _out_or(cfg.out, args.out, f"runs/{study}")
    summary = run_study(cfg, out_dir, threads=args.threads or 1)
    print(f"{study} study complete; artifacts in {out_dir}")
    if isinstance(summary, dict) and "pass" in summary:
        print(f"pass: {summary['pass']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-predictor":
            return _cmd_train_predictor(args)
        if args.command == "train-canon":
            return _cmd_train_canon(args)
        if args.command == "export-logits":
            return _cmd_export_logits(args)
        return _cmd_run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
