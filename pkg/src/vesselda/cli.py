"""``vesselda`` command line: generate, train, eval, bench, analyze-bn.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

from . import bench as benchmod
from . import config as cfgmod
from .bn_analysis import analyze, collect_bn_stats
from .data import SPLIT_DOMAIN, SPLITS, Dataset, make_dataset
from .metrics import evaluate_split
from .segnet import load_checkpoint
from .trainer import REGIMES, AUX_REGIMES, NumericalError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_FILE = "run_manifest.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class RunManifest:
    """Written before a run starts and finalized (end time, status) after it."""

    def __init__(self, out_dir, subcommand: str, config_hash: str, seed, data_root, inputs=None):
        self.path = Path(out_dir) / MANIFEST_FILE
        self.fields = {
            "subcommand": subcommand,
            "config_hash": config_hash,
            "seed": str(seed),
            "data_root": str(data_root),
            "out_dir": str(out_dir),
            **(inputs or {}),
            "start": _now(),
        }

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(f"{k} = {v}\n" for k, v in self.fields.items()))

    def begin(self):
        self.fields["status"] = "running"
        self._write()

    def finalize(self, status: str):
        self.fields["end"] = _now()
        self.fields["status"] = status
        self._write()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path, required) -> cfgmod.ExperimentConfig:
    try:
        return cfgmod.load(path, required)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None


def _check_regime(name: str) -> None:
    if name not in REGIMES + AUX_REGIMES:
        raise UsageError(f"invalid regime {name!r}; valid regimes: {', '.join(REGIMES)} (auxiliary: {', '.join(AUX_REGIMES)})")


def cmd_generate(args) -> int:
    exp = _load_config(args.config, cfgmod.GENERATE_SECTIONS)
    if args.seed is not None:
        exp.synth.seed = args.seed
    man = RunManifest(args.out, "generate", cfgmod.config_hash(exp), exp.synth.seed, args.out)
    man.begin()
    try:
        make_dataset(args.out, exp.synth, exp.data.as_splits(), exp.prep)
    except BaseException:
        man.finalize("failed")
        raise
    man.finalize("ok")
    print(f"dataset written to {args.out}: " + ", ".join(f"{k}={v}" for k, v in exp.data.as_splits().items()))
    return EXIT_OK


def cmd_train(args) -> int:
    _check_regime(args.regime)
    exp = _load_config(args.config, cfgmod.TRAIN_SECTIONS)
    exp.train.regime = args.regime
    if args.seed is not None:
        exp.train.seed = args.seed
    dataset = Dataset(args.data)
    man = RunManifest(args.out, "train", cfgmod.config_hash(exp), exp.train.seed, args.data,
                      {"regime": args.regime})
    man.begin()
    try:
        result = train(exp.train, dataset, args.out, exp.net, cfgmod.dump(exp))
    except BaseException:
        man.finalize("failed")
        raise
    man.finalize("ok")
    print(f"{args.regime} seed {exp.train.seed}: final validation Dice {result.final_val_dice:.4f} "
          f"(best {result.best_val_dice:.4f} at epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; valid splits: {', '.join(SPLITS)}")
    net, _ = load_checkpoint(args.ckpt)
    dataset = Dataset(args.data)
    man = RunManifest(args.out, "eval", "-", "-", args.data,
                      {"ckpt": args.ckpt, "ckpt_sha256": _file_sha(args.ckpt), "split": args.split})
    man.begin()
    out = Path(args.out)
    try:
        report = evaluate_split(net, dataset.load(args.split), SPLIT_DOMAIN[args.split],
                                out / f"metrics_{args.split}.csv", out / "overlays" if args.overlays else None)
    except BaseException:
        man.finalize("failed")
        raise
    man.finalize("ok")
    mu, sd = report.mean(), report.std()
    print(" ".join(f"{k} {mu[k]:.4f}±{sd[k]:.4f}" for k in ("recall", "precision", "dice")))
    return EXIT_OK


def cmd_bench(args) -> int:
    exp = _load_config(args.config, cfgmod.TRAIN_SECTIONS)
    Dataset(args.data)
    man = RunManifest(args.out, "bench", cfgmod.config_hash(exp), exp.train.seed, args.data,
                      {"seeds": str(args.seeds)})
    man.begin()
    try:
        passed, lines, _ = benchmod.run_bench(exp, args.data, args.out, args.seeds)
    except BaseException:
        man.finalize("failed")
        raise
    man.finalize("ok")
    print(Path(args.out, "bench_table.csv").read_text(), end="")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_analyze_bn(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    src_net = load_checkpoint(args.source_ckpt)[0] if args.source_ckpt else None
    dataset = Dataset(args.data)
    inputs = {"ckpt": args.ckpt, "ckpt_sha256": _file_sha(args.ckpt), "n_batches": str(args.n_batches)}
    if args.source_ckpt:
        inputs["source_ckpt"] = args.source_ckpt
    man = RunManifest(args.out, "analyze-bn", "-", args.seed, args.data, inputs)
    man.begin()
    try:
        records = collect_bn_stats(net, dataset.load("S_L"), dataset.load("T_L"), args.n_batches, args.seed,
                                   source_network=src_net)
        reports = analyze(records, args.out, seed=args.seed)
        lines = ["layer,layer_id,silhouette,control,margin"]
        for r in reports.values():
            lines.append(f"{r.depth_class},{r.layer_id},{r.silhouette!r},{r.control!r},{r.margin!r}")
        Path(args.out, "silhouette.csv").write_text("\n".join(lines) + "\n")
    except BaseException:
        man.finalize("failed")
        raise
    man.finalize("ok")
    for r in reports.values():
        print(f"{r.depth_class:<12} {r.layer_id:<10} silhouette {r.silhouette:+.4f}  "
              f"control {r.control:+.4f}  margin {r.margin:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesselda", description="Semi-supervised cross-domain vessel segmentation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a two-domain dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override synth.seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one regime")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--regime", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override train.seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--overlays", action="store_true", help="write TP/FN/FP overlay PPMs")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="all regimes over N seeds plus the ordering verdict")
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int, required=True)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze-bn", help="BN-statistic separability between domains")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--n-batches", type=int, default=20, help="batches per domain (>= 2)")
    a.add_argument("--source-ckpt", help="separately trained source network (two-network protocol)")
    a.set_defaults(func=cmd_analyze_bn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vesselda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"vesselda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"vesselda: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except benchmod.BenchError as exc:
        print(f"vesselda: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, NumericalError) else EXIT_DATA
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"vesselda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
