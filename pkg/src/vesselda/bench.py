"""All five regimes over several seeds, a Table-1-shaped summary and the ordering verdict."""

from __future__ import annotations

import copy
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import Dataset
from .domain import Domain
from .metrics import evaluate_split
from .segnet import load_checkpoint
from .trainer import REGIMES, train

TRAINING_SETS = {
    "L-SUP": "T_L",
    "JOINT": "S_L+T_L",
    "VSBN": "S_L+T_L",
    "SE-MT": "T_L+T_U",
    "SS-CADA": "S_L+T_L+T_U",
}
METRIC_KEYS = ("recall", "precision", "dice")
SS_MARGIN_POINTS = 2.0


class BenchError(RuntimeError):
    def __init__(self, regime: str, seed: int, cause: BaseException):
        super().__init__(f"bench cell {regime} seed {seed} failed: {cause}")
        self.regime = regime
        self.seed = seed
        self.cause = cause


@dataclass
class CellResult:
    regime: str
    seed: int
    test: dict[str, float]  # mean over test images, fractions in [0, 1]
    best_epoch: int
    best_val_dice: float


def bench_threads() -> int:
    raw = os.environ.get("CADA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CADA_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_cell(exp: cfgmod.ExperimentConfig, data_root, out_root, regime: str, seed: int) -> CellResult:
    """Train one (regime, seed) cell and evaluate its best checkpoint on T_test."""
    exp = copy.deepcopy(exp)
    exp.train.regime = regime
    exp.train.seed = seed
    out = Path(out_root) / regime / str(seed)
    dataset = Dataset(data_root)
    result = train(exp.train, dataset, out, exp.net, cfgmod.dump(exp))
    net, _ = load_checkpoint(out / "best.ckpt")
    report = evaluate_split(net, dataset.load("T_test"), Domain.TARGET, out / "test_metrics.csv")
    return CellResult(regime, seed, report.mean(), result.best_epoch, result.best_val_dice)


def _cell_job(args):
    exp, data_root, out_root, regime, seed = args
    try:
        return run_cell(exp, data_root, out_root, regime, seed)
    except Exception as exc:  # re-raised in the parent with the cell named
        return BenchError(regime, seed, exc)


def run_cells(exp, data_root, out_root, seeds: list[int], workers: int = 1) -> list[CellResult]:
    jobs = [(exp, str(data_root), str(out_root), r, s) for r in REGIMES for s in seeds]
    if workers <= 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    for r in results:
        if isinstance(r, BenchError):
            raise r
    return results


def summarize(cells: list[CellResult]) -> dict[str, dict[str, tuple[float, float]]]:
    """Per regime and metric: (mean, population std) over seeds, in percent."""
    out = {}
    for regime in REGIMES:
        rows = [c for c in cells if c.regime == regime]
        if not rows:
            continue
        out[regime] = {}
        for k in METRIC_KEYS:
            v = 100.0 * np.array([c.test[k] for c in rows])
            out[regime][k] = (float(v.mean()), float(v.std()))
    return out


def ordering_verdict(mean_dice: dict[str, float]) -> tuple[bool, list[str]]:
    """Checks on mean test Dice in percent; returns (all hold, one line per check)."""
    ss, ls, se, vs, jo = (mean_dice[r] for r in ("SS-CADA", "L-SUP", "SE-MT", "VSBN", "JOINT"))
    checks = [
        (f"SS-CADA > L-SUP + {SS_MARGIN_POINTS:g}", ss > ls + SS_MARGIN_POINTS, ss, ls + SS_MARGIN_POINTS),
        ("SS-CADA >= SE-MT", ss >= se, ss, se),
        ("SS-CADA >= VSBN", ss >= vs, ss, vs),
        ("VSBN >= JOINT", vs >= jo, vs, jo),
    ]
    lines = [f"{'ok  ' if ok else 'FAIL'} {name}: {a:.2f} vs {b:.2f}" for name, ok, a, b in checks]
    return all(ok for _, ok, _, _ in checks), lines


def table_csv(summary) -> str:
    lines = ["training_set,method,recall,precision,dice"]
    for regime, m in summary.items():
        cells = ",".join(f"{m[k][0]:.2f}±{m[k][1]:.2f}" for k in METRIC_KEYS)
        lines.append(f"{TRAINING_SETS[regime]},{regime},{cells}")
    return "\n".join(lines) + "\n"


def seeds_csv(cells: list[CellResult]) -> str:
    lines = ["method,seed,best_epoch,best_val_dice,test_recall,test_precision,test_dice"]
    for c in cells:
        lines.append(f"{c.regime},{c.seed},{c.best_epoch},{c.best_val_dice!r},"
                     + ",".join(repr(c.test[k]) for k in METRIC_KEYS))
    return "\n".join(lines) + "\n"


def run_bench(exp: cfgmod.ExperimentConfig, data_root, out_root, n_seeds: int, workers: int | None = None):
    """Returns (passed, verdict lines, summary); writes table, per-seed CSV and verdict."""
    if n_seeds < 1:
        raise ValueError("--seeds must be >= 1")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    seeds = [exp.train.seed + i for i in range(n_seeds)]
    cells = run_cells(exp, data_root, out_root, seeds, bench_threads() if workers is None else workers)
    summary = summarize(cells)
    passed, lines = ordering_verdict({r: summary[r]["dice"][0] for r in REGIMES})
    (out_root / "bench_table.csv").write_text(table_csv(summary))
    (out_root / "bench_seeds.csv").write_text(seeds_csv(cells))
    verdict = f"VERDICT: {'PASS' if passed else 'FAIL'}"
    (out_root / "verdict.txt").write_text("\n".join(lines + [verdict]) + "\n")
    return passed, lines + [verdict], summary


def load_bench_summary(out_root) -> dict[str, float]:
    """Mean test Dice (percent) per regime from a finished bench directory."""
    rows = Path(out_root, "bench_seeds.csv").read_text().splitlines()[1:]
    acc: dict[str, list[float]] = {}
    for row in rows:
        parts = row.split(",")
        acc.setdefault(parts[0], []).append(100.0 * float(parts[6]))
    return {r: float(np.mean(v)) for r, v in acc.items()}
