"""Command-line entry point: ``stackalign {gen-data,train,eval,gradcheck,diag}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric divergence, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
SPLITS = (200, 40, 40)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from e


# ------------------------------------------------------------ subcommands

def cmd_gen_data(args) -> int:
    from .data import GeneratorConfig, fit_standardizer, generate, split_dataset, write_jsonl

    flat = _read_json(args.config) if args.config else {}
    flat.update(_overrides(args.set))
    sizes = tuple(flat.pop("splits", SPLITS))
    flat.setdefault("num_episodes", sum(sizes))
    cfg = GeneratorConfig.from_dict(flat)
    train, val, test = split_dataset(generate(cfg), sizes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, eps in (("train", train), ("val", val), ("test", test)):
        write_jsonl(out / f"{name}.jsonl", eps)
    fit_standardizer(train).save(out / "standardizer.json")
    print(f"wrote {len(train)}/{len(val)}/{len(test)} episodes to {out}")
    return EXIT_OK


def _default_out_dir(cfg) -> Path:
    if cfg.out_dir:
        return Path(cfg.out_dir)
    base = Path(os.environ.get("STACKALIGN_OUT", "runs"))
    return base / (cfg.preset or "run")


def cmd_train(args) -> int:
    from .train import Trainer, load_datasets, load_run_config, run_config_from_flat

    overrides = _overrides(args.set)
    for key, value in (("preset", args.preset), ("epochs", args.epochs), ("out_dir", args.out_dir),
                       ("seed", args.seed)):
        if value is not None:
            overrides[key] = value
    cfg = load_run_config(args.config, overrides) if args.config else run_config_from_flat(overrides)
    train, val, std = load_datasets(cfg)
    out = _default_out_dir(cfg)
    trainer = Trainer(cfg, train, val, std, out_dir=out)
    history = trainer.run(resume_from=args.resume, progress=not args.quiet)
    last = history[-1] if history else None
    if last is not None:
        summary = dict(epoch=last["epoch"], train_loss=last["train_loss"], train_acc=last["train_acc"])
        if last["val"] is not None:
            summary.update({f"val_{k}": v for k, v in last["val"].items()})
        print(json.dumps(summary, sort_keys=True))
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import Standardizer, apply_standardizer, read_jsonl
    from .model import load_checkpoint
    from .train import evaluate, prepare

    model, extra = load_checkpoint(args.checkpoint)
    if args.standardizer:
        std = Standardizer.load(args.standardizer)
    elif "standardizer" in extra:
        std = Standardizer.from_dict(extra["standardizer"])
    else:
        raise UsageError("checkpoint carries no standardizer; pass --standardizer")
    episodes = apply_standardizer(std, read_jsonl(args.data))
    metrics = evaluate(model, prepare(model, episodes, std), args.batch_size, oracle=args.oracle)
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, SCOPES, TOLERANCE, run_suite

    if args.scope != "all" and args.scope not in CHECKS:
        raise UsageError(f"unknown scope {args.scope!r}; choose from {', '.join(('all',) + SCOPES)}")
    results = run_suite(args.scope, args.seed, args.tolerance or TOLERANCE)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    print(f"worst relative error {max(r.worst for r in results):.3e}; "
          + ("all passed" if not failed else f"FAILED: {', '.join(failed)}"))
    return EXIT_OK if not failed else EXIT_DIVERGED


def cmd_diag(args) -> int:
    import warnings

    import numpy as np

    from .diagnostics import ShortWindowWarning, read_feature_stats, read_metrics, read_ratios, summarize

    run = Path(args.run_dir)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ShortWindowWarning)
        summary = summarize(read_ratios(run / "ratios.csv"), args.window)
    feats = read_feature_stats(run / "feature_stats.csv").feature_stats
    if feats:
        final = max(r[0] for r in feats)
        summary["features"] = {}
        for stack in dict.fromkeys(r[1] for r in feats):
            rows = [r for r in feats if r[0] == final and r[1] == stack]
            means = np.array([r[3] for r in rows])
            var = np.array([r[4] for r in rows])
            summary["features"][stack] = dict(epoch=final, max_abs_mean=float(np.abs(means).max()),
                                              mean_variance=float(var.mean()))
    metrics = [m for m in read_metrics(run / "metrics.csv") if m["split"] == "val"]
    if metrics:
        summary["final_val"] = {k: float(v) for k, v in metrics[-1].items() if k not in ("split",) and v != ""}
    if args.json:
        print(json.dumps(summary, sort_keys=True, indent=2))
        return EXIT_OK
    for w in caught:
        print(f"warning: {w.message}")
    print(f"ratio means over last {summary['window']} epochs")
    for group, s in summary["groups"].items():
        mean = "inf" if math.isinf(s["mean"]) else f"{s['mean']:.4g}"
        print(f"  {group:<20} {mean:>12}  (inf: {s['inf_count']})")
    if "text_over_video" in summary:
        print(f"  {'Text/Video':<20} {summary['text_over_video']:>12.4g}")
    for stack, s in summary.get("features", {}).items():
        print(f"features {stack}: max |mean| {s['max_abs_mean']:.4g}, mean variance {s['mean_variance']:.4g} "
              f"(epoch {s['epoch']})")
    if "final_val" in summary:
        fv = summary["final_val"]
        print(f"final val: video acc {fv['video_accuracy']:.4f}, text IoU {fv['text_iou']:.4f}, "
              f"action acc {fv['action_accuracy']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stackalign", description="Stack-based video/text alignment experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON file with generator fields (and optional 'splits')")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?", help="JSON run config with dotted keys")
    t.add_argument("--preset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a dataset split with a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data", help="JSONL split")
    e.add_argument("--standardizer")
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--oracle", action="store_true", help="score the gold alignments instead of decoding")
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("scope", nargs="?", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diag", help="summarize the logs of a run directory")
    d.add_argument("run_dir")
    d.add_argument("--window", type=int, default=20)
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    from .alignment import ExpressivenessError
    from .data import ConfigError as DataConfigError
    from .optim import TrainingDiverged
    from .tensorcore import ContractError, ParameterError, ShapeError
    from .train import ConfigError

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataConfigError, ParameterError, ExpressivenessError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, ContractError) as e:
        print(f"load error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
