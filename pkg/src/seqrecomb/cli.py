"""Command-line entry points for the experiment pipeline.

Each subcommand runs one stage against an output directory (later stages read
the artifacts earlier ones wrote there); `run` executes the whole pipeline.
Configs are JSON; `--config` may be a preset name (scan-jump,
scan-around-right, morph-analysis) or a path to a JSON file, optionally with
a "preset" key to inherit defaults.

Exit codes: 0 success, 1 usage/config error, then one code per failed stage
(split=2, neighbors=3, train-recomb=4, sample=5, train-cond=6, eval=7,
analyze=8).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as P
from .recombiner import Recombiner


def load_config(spec: str) -> dict:
    try:
        return P.preset(spec)
    except ValueError:
        pass
    with open(spec, encoding="utf-8") as f:
        cfg = json.load(f)
    if "preset" in cfg:
        base = P.preset(cfg.pop("preset"))
        cfg = P.merge_config(base, cfg)
    return cfg


def _experiment(args) -> P.Experiment:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return P.Experiment(config=cfg, out_dir=args.out_dir)


def _log(msg: str):
    print(msg, flush=True)


def cmd_split(args):
    exp = _experiment(args)
    split = exp.stage_split()
    _log(f"train {len(split.train)} examples; "
         + "; ".join(f"test[{k}] {len(v)}" for k, v in sorted(split.tests.items())))


def cmd_neighbors(args):
    exp = _experiment(args)
    split = exp.load_split()
    index = exp.stage_neighbors(split.train)
    _log(f"index: {index.instance_count()} prototype tuples over "
         f"{len(index.tuples)} targets")


def cmd_train_recomb(args):
    exp = _experiment(args)
    split = exp.load_split()
    index = exp.load_index()
    exp.stage_train_recomb(split.train, index, log=_log)
    _log("recombiner saved")


def cmd_sample(args):
    exp = _experiment(args)
    split = exp.load_split()
    index = exp.load_index()
    model = Recombiner.load(exp._p("recombiner.ckpt"))
    augmented = exp.stage_sample(split.train, index, model, log=_log)
    _log(f"accepted {len(augmented)} augmented examples")


def cmd_train_cond(args):
    exp = _experiment(args)
    split = exp.load_split()
    augmented = exp.load_augmented()
    exp.stage_train_cond(split.train, augmented, log=_log)
    _log("conditional model saved")


def cmd_eval(args):
    exp = _experiment(args)
    split = exp.load_split()
    model = Recombiner.load(exp._p("conditional.ckpt"))
    report = exp.stage_eval(model, split.tests)
    for name, m in sorted(report["tests"].items()):
        _log(f"{name}: exact match {m['exact_match']:.4f}  "
             f"token F1 {m['token_f1']:.4f}  (n={m['n']})")


def cmd_analyze(args):
    exp = _experiment(args)
    augmented = exp.load_augmented()
    analysis = exp.stage_analyze(augmented)
    _log(json.dumps(analysis, indent=2, sort_keys=True))


def cmd_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    report = P.run_experiment(cfg, args.out_dir, log=_log)
    for name, m in sorted(report["tests"].items()):
        _log(f"{name}: exact match {m['exact_match']:.4f}  "
             f"token F1 {m['token_f1']:.4f}  (n={m['n']})")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="seqrecomb",
        description="prototype-recombination data augmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {"split": cmd_split, "neighbors": cmd_neighbors,
                "train-recomb": cmd_train_recomb, "sample": cmd_sample,
                "train-cond": cmd_train_cond, "eval": cmd_eval,
                "analyze": cmd_analyze, "run": cmd_run}
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="preset name or JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", required=True,
                       help="artifact directory for this run")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
