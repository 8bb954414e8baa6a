"""Command-line entry point: ``groundcl <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, build_datasets, load_config
from .experiment import (
    Checkpoint,
    CheckpointError,
    TrainingDiverged,
    evaluate,
    run_ablation,
    run_transfer,
    similarity_analysis,
    train,
)
from .world import SchemaError, load_dataset, make_datasets, save_dataset

log = logging.getLogger("groundcl")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="seed applied to every stochastic component")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable")
    common.add_argument("--data", help="directory of dataset files from gen-data")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="groundcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate and save the datasets")
    sub.add_parser("train", parents=[common], help="train one model on the joint benchmark")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", default="base")
    ev.add_argument("--split", default="val", choices=("train", "val", "test"))
    sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    sub.add_parser("transfer", parents=[common], help="run the transfer-learning matrix")
    an = sub.add_parser("analyze", parents=[common], help="synonymous-pair similarity of a checkpoint")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--dataset", action="append", help="dataset name(s); default all")
    sub.add_parser("selftest", parents=[common], help="run the oracle and gradient checks")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _prepare_out(args, cfg: RunConfig | None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "resolved_config.yaml").write_text(cfg.dump(), encoding="utf-8")
    return out


def _datasets(args, cfg: RunConfig, reason: bool = True):
    if args.data:
        d = Path(args.data)
        names = ["base", "plus"] + (["reason"] if reason else [])
        out = {}
        for n in names:
            f = d / f"{n}.jsonl"
            if not f.exists():
                raise FileNotFoundError(f"dataset file not found: {f}")
            out[n] = load_dataset(f)
        return out
    return build_datasets(cfg, include_reason=reason)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args, cfg)
    for dcfg in (cfg.joint, cfg.reason):
        for name, ds in make_datasets(dcfg).items():
            save_dataset(ds, out / f"{name}.jsonl", dcfg)
            log.info("wrote %s (%d pairs)", out / f"{name}.jsonl",
                     sum(len(ds.pairs(s)) for s in ("train", "val", "test")))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    datasets = _datasets(args, cfg, reason=False)
    out = _prepare_out(args, cfg)
    res = train(cfg.train, datasets, progress=log.info)
    res.checkpoint.save(out / "checkpoint.bin")
    res.report.save(out / "metrics.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    datasets = _datasets(args, cfg)
    if args.dataset not in datasets:
        raise UsageError(f"unknown dataset {args.dataset!r}")
    result = evaluate(ckpt, datasets[args.dataset], args.split)
    out = _prepare_out(args, cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["index", "scene_id", "tokens", "pred", "iou", "correct"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(result.predictions)
    (out / "predictions.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "eval.json").write_text(json.dumps(
        {"dataset": args.dataset, "split": args.split, "accuracy": result.accuracy, "n": result.n},
        sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"{args.dataset}/{args.split} accuracy {result.accuracy:.4f} (n={result.n})",
          file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    datasets = _datasets(args, cfg, reason=False)
    out = _prepare_out(args, cfg)
    table = run_ablation(cfg.train, datasets, cfg.seeds, progress=log.info)
    table.save(out / "ablation.csv")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    datasets = _datasets(args, cfg)
    out = _prepare_out(args, cfg)
    table = run_transfer(cfg.train, cfg.finetune, datasets, cfg.seeds, progress=log.info)
    table.save(out / "transfer.csv")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    datasets = _datasets(args, cfg)
    names = args.dataset or sorted(datasets)
    unknown = [n for n in names if n not in datasets]
    if unknown:
        raise UsageError(f"unknown dataset(s) {unknown}")
    out = _prepare_out(args, cfg)
    seed = cfg.train.seed
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "split", "sim_mean", "n", "skipped"])
    for n in names:
        for split in ("val", "test"):
            r = similarity_analysis(ckpt, datasets[n], split, seed)
            w.writerow([n, split, repr(r.mean), r.n, r.skipped])
    (out / "similarity.csv").write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    passed, total = run_selftest(report=lambda s: print(s, file=sys.stderr))
    print(f"selftest: {passed}/{total} checks passed", file=sys.stderr)
    return EXIT_OK if passed == total else EXIT_DOMAIN


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "analyze": cmd_analyze,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (SchemaError, CheckpointError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
