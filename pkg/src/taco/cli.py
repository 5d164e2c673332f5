"""Command-line entry point.

Verbs: make-dataset, train-codec, train-task, scenario1, scenario2,
scenario3, inspect-message. Configuration comes from an optional flat
key=value file; flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data, harness


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--limit", type=int, help="cap on evaluated test images")


def _cfg(args) -> harness.RunConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("data_dir", "out_dir", "seed", "limit")
    }
    return harness.load_run_config(args.config, overrides)


def _ckpt(cfg: harness.RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, f"{name}.ckpt")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="taco")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-dataset", help="generate the synthetic desk dataset")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train", type=int, default=640)
    p.add_argument("--val", type=int, default=128)
    p.add_argument("--test", type=int, default=160)
    p.add_argument("--size", type=int, default=64)

    for verb in ("train-codec", "scenario1", "scenario2", "scenario3"):
        _add_common(sub.add_parser(verb))
    p = sub.add_parser("train-task")
    _add_common(p)
    p.add_argument("--task", choices=("shape", "glyph"), default="shape")

    p = sub.add_parser("inspect-message", help="summarize a serialized wire message")
    p.add_argument("path")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.verb == "make-dataset":
        manifests = data.generate_dataset(
            args.out_dir, args.train, args.val, args.test, args.size, args.seed
        )
        print(json.dumps(manifests, indent=2))
        return 0
    if args.verb == "inspect-message":
        print(json.dumps(harness.inspect_message(args.path), indent=2))
        return 0

    cfg = _cfg(args)
    if args.verb == "train-codec":
        harness.train_codec_cmd(cfg, _ckpt(cfg, "codec"))
        return 0
    if args.verb == "train-task":
        harness.train_task_cmd(cfg, args.task, _ckpt(cfg, f"task_{args.task}"))
        return 0

    codec = harness.load_codec(_ckpt(cfg, "codec"))
    task_a = harness.load_task(_ckpt(cfg, "task_shape"))
    if args.verb == "scenario1":
        rows = harness.run_scenario1(cfg, codec, task_a)
    elif args.verb == "scenario2":
        rows = harness.run_scenario2(cfg, codec, task_a)
    else:
        task_b = harness.load_task(_ckpt(cfg, "task_glyph"))
        rows = harness.run_scenario3(cfg, codec, task_a, task_b)
    harness.emit_report(rows, cfg.out_dir, cfg.seed, plots=True)
    print(f"wrote {os.path.join(cfg.out_dir, 'metrics.csv')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
