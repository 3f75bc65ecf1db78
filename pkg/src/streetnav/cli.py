"""Command-line entry point.

Subcommands cover the whole pipeline: gen-world, make-splits, train-bpe,
train, evaluate, oracle-eval, mask-eval, report.  Exit codes: 0 success,
1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FeatureStoreError,
    MetricError,
    StreetNavError,
    VocabError,
    WorldGenError,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


def _cmd_gen_world(args) -> int:
    from .env import save_instances
    from .worldgen import World, WorldSpec, build_lexicons, gen_instances, gen_world

    spec = WorldSpec(
        grid_width=args.grid_width,
        grid_height=args.grid_height,
        edge_jitter=args.jitter,
        keep_edge_prob=args.keep_edge_prob,
        diagonal_prob=args.diagonal_prob,
        landmark_count=args.landmarks,
        prefinal_dim=args.prefinal_dim,
        seed=args.seed,
    )
    world = gen_world(spec)
    world.save(args.out)
    all_instances = []
    for style, count in (("touchdown", args.touchdown), ("map2seq", args.map2seq)):
        if count <= 0:
            continue
        instances = gen_instances(
            world, style, count, args.seed, min_len=args.min_len, max_len=args.max_len
        )
        save_instances(instances, os.path.join(args.out, f"instances_{style}.jsonl"))
        all_instances.extend(instances)
        print(f"wrote {len(instances)} {style} instances")
    if all_instances:
        corpus = [inst.instruction for inst in all_instances]
        direction, objects = build_lexicons(world, corpus)
        direction.save(os.path.join(args.out, "lexicon_direction.json"))
        objects.save(os.path.join(args.out, "lexicon_object.json"))
    print(f"world with {len(world.graph.nodes)} nodes written to {args.out}")
    return EXIT_OK


def _cmd_make_splits(args) -> int:
    from .env import load_instances, save_instances
    from .worldgen import SplitSpec, World, make_splits, merge_splits, vertical_boundary

    world = World.load(args.world)
    spec = SplitSpec(
        boundary=vertical_boundary(world.graph, args.boundary_fraction),
        dev_count=args.dev,
        test_count=args.test,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    per_file = []
    for path in args.instances:
        instances = load_instances(path)
        splits = make_splits(instances, world.graph, spec)
        per_file.append(splits)
        stem = os.path.splitext(os.path.basename(path))[0].replace("instances_", "")
        for scenario, parts in splits.items():
            for split, insts in parts.items():
                out_path = os.path.join(args.out, f"{stem}_{scenario}_{split}.jsonl")
                save_instances(insts, out_path)
                print(f"{out_path}: {len(insts)}")
    if len(per_file) > 1:
        merged = per_file[0]
        for other in per_file[1:]:
            merged = merge_splits(merged, other)
        for scenario, parts in merged.items():
            for split, insts in parts.items():
                out_path = os.path.join(args.out, f"merged_{scenario}_{split}.jsonl")
                save_instances(insts, out_path)
                print(f"{out_path}: {len(insts)}")
    return EXIT_OK


def _cmd_train_bpe(args) -> int:
    from .bpe import train_bpe
    from .env import load_instances

    corpus = []
    for path in args.instances:
        corpus.extend(inst.instruction for inst in load_instances(path))
    model = train_bpe(corpus, vocab_size=args.vocab_size)
    model.save(args.out)
    print(f"bpe model with {model.vocab_size} tokens written to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .harness import ExperimentConfig, train_run

    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    summary = train_run(config, args.out, quiet=args.quiet)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .env import load_instances
    from .harness import (
        ExperimentConfig,
        evaluate_model,
        load_run_context,
        load_trained_model,
        write_evaluation,
    )

    config = ExperimentConfig.load(os.path.join(args.run, "experiment.json"))
    ctx = load_run_context(config)
    model = load_trained_model(args.run, ctx)
    instances = load_instances(args.split)
    report, trajectories = evaluate_model(model, ctx, instances, threads=args.threads)
    write_evaluation(report, trajectories, instances, args.out)
    meta = {"group": args.group or config.name, "seed": config.seed, "split": args.split}
    with open(os.path.join(args.out, "eval_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
    print(json.dumps(report.to_json()["means"], sort_keys=True))
    return EXIT_OK


def _cmd_oracle_eval(args) -> int:
    from .env import load_instances
    from .harness import (
        ExperimentConfig,
        load_run_context,
        load_trained_model,
        oracle_evaluate,
    )

    config = ExperimentConfig.load(os.path.join(args.run, "experiment.json"))
    ctx = load_run_context(config)
    model = None if args.gold_control else load_trained_model(args.run, ctx)
    instances = load_instances(args.split)
    report = oracle_evaluate(model, ctx, instances, args.subtask)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"oracle_{args.subtask}.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True)
    print(json.dumps({"subtask": args.subtask, "tc": report.mean("tc")}, sort_keys=True))
    return EXIT_OK


def _cmd_mask_eval(args) -> int:
    from .harness import ExperimentConfig, mask_eval

    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    k_list = [int(k) for k in args.k_list.split(",")]
    rows = mask_eval(config, args.lexicon, k_list, args.out, test_path=args.test, quiet=args.quiet)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import generate_report

    rows = generate_report(args.results, args.out, baseline=args.baseline)
    for row in rows:
        print(
            f"{row['group']}: tc {row['tc_mean']:.3f} +- {row['tc_std']:.3f}"
            + (
                f" (p={row['p_tc_vs_baseline']:.4f} vs baseline)"
                if row["p_tc_vs_baseline"] is not None
                else ""
            )
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streetnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic world plus instances")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-width", type=int, default=20)
    p.add_argument("--grid-height", type=int, default=20)
    p.add_argument("--jitter", type=float, default=0.18)
    p.add_argument("--keep-edge-prob", type=float, default=0.85)
    p.add_argument("--diagonal-prob", type=float, default=0.04)
    p.add_argument("--landmarks", type=int, default=60)
    p.add_argument("--prefinal-dim", type=int, default=64)
    p.add_argument("--touchdown", type=int, default=0, help="touchdown-style instance count")
    p.add_argument("--map2seq", type=int, default=0, help="map2seq-style instance count")
    p.add_argument("--min-len", type=int, default=15)
    p.add_argument("--max-len", type=int, default=25)
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("make-splits", help="seen/unseen train/dev/test splits")
    p.add_argument("--world", required=True)
    p.add_argument("--instances", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dev", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--boundary-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_splits)

    p = sub.add_parser("train-bpe", help="train the subword tokenizer")
    p.add_argument("--instances", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.set_defaults(func=_cmd_train_bpe)

    p = sub.add_parser("train", help="train one agent")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="greedy rollouts plus metrics on a split")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group", default=None, help="group label for the report")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("oracle-eval", help="isolate one sub-task with gold actions")
    p.add_argument("--run", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--subtask", required=True, choices=["orientation", "directions", "stopping"])
    p.add_argument("--out", required=True)
    p.add_argument("--gold-control", action="store_true", help="replace the model with gold replay")
    p.set_defaults(func=_cmd_oracle_eval)

    p = sub.add_parser("mask-eval", help="token-masking sweep (train per k)")
    p.add_argument("--config", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--k-list", required=True, help="comma-separated masking counts")
    p.add_argument("--out", required=True)
    p.add_argument("--test", default=None, help="evaluate on this split instead of dev")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_mask_eval)

    p = sub.add_parser("report", help="aggregate metrics into tables and figures")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FeatureStoreError, VocabError, WorldGenError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StreetNavError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
