"""Training loop for the five regimes.

Regimes and the splits they consume:

    L-SUP    T_L                 TARGET view only
    JOINT    S_L + T_L           one mixed batch through the TARGET view
    VSBN     S_L + T_L           SOURCE view for S_L, TARGET view for T_L
    SE-MT    T_L + T_U           TARGET view + EMA teacher consistency
    SS-CADA  S_L + T_L + T_U     VSBN + EMA teacher consistency

S-SUP (S_L only, SOURCE view) is an auxiliary regime used to obtain a
separately trained source network for BN-statistic analysis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, DomainSample
from .domain import Domain
from .losses import LossConfig, lambda_rampup, supervised_loss, total_loss
from .mean_teacher import PerturbConfig, TeacherState, consistency_step, ema_update, target_view
from .metrics import mean_dice
from .segnet import NetworkConfig, SegNet, save_checkpoint
from .tensor import Parameter

log = logging.getLogger(__name__)

REGIMES = ("L-SUP", "JOINT", "VSBN", "SE-MT", "SS-CADA")
AUX_REGIMES = ("S-SUP",)
REGIME_SPLITS = {
    "L-SUP": ("T_L",),
    "JOINT": ("S_L", "T_L"),
    "VSBN": ("S_L", "T_L"),
    "SE-MT": ("T_L", "T_U"),
    "SS-CADA": ("S_L", "T_L", "T_U"),
    "S-SUP": ("S_L",),
}
TEACHER_REGIMES = ("SE-MT", "SS-CADA")
LOG_HEADER = "iter,epoch,lr,lambda,loss_s,loss_c,loss_total"


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    batch_size: int = 6
    n_S: int = 2
    n_T: int = 2
    n_U: int = 2
    epochs: int = 50
    lr_decay_power: float = 0.95
    ema_decay: float = 0.99
    regime: str = "SS-CADA"
    seed: int = 0
    iters_per_epoch: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)

    def validate(self) -> None:
        if self.regime not in REGIMES + AUX_REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; valid regimes: {', '.join(REGIMES)}")
        if self.n_S + self.n_T + self.n_U != self.batch_size:
            raise ValueError(f"n_S + n_T + n_U = {self.n_S + self.n_T + self.n_U} != batch_size {self.batch_size}")
        if min(self.n_S, self.n_T, self.n_U) < 0 or self.epochs < 1:
            raise ValueError("batch split counts must be >= 0 and epochs >= 1")

    def split_counts(self) -> dict[str, int]:
        """Per-split draws per iteration; inactive splits are dropped, L-SUP fills the batch from T_L."""
        if self.regime == "L-SUP":
            return {"T_L": self.batch_size}
        if self.regime == "S-SUP":
            return {"S_L": self.batch_size}
        full = {"S_L": self.n_S, "T_L": self.n_T, "T_U": self.n_U}
        return {s: full[s] for s in REGIME_SPLITS[self.regime]}


def sgd_momentum_step(params: list[Parameter], lr: float, momentum: float = 0.9) -> None:
    """v <- momentum * v + g;  p <- p - lr * v;  then zero the gradients."""
    for p in params:
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad
        p.data -= lr * p.momentum_buf
        p.zero_grad()


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * config.lr_decay_power ** epoch


def rampup_time(epoch: int, config: TrainConfig) -> float:
    """Map epoch 0..epochs-1 onto ramp-up time 0..t_max (both ends exact)."""
    t_max = config.loss.t_max
    if config.epochs == 1:
        return float(t_max)
    if epoch == config.epochs - 1:
        return float(t_max)
    return epoch * t_max / (config.epochs - 1)


def iterations_per_epoch(config: TrainConfig, counts: dict[str, int]) -> int:
    if config.iters_per_epoch > 0:
        return config.iters_per_epoch
    n = counts.get("T_L", 0) + counts.get("T_U", 0)
    per = config.n_T + config.n_U
    return max(1, math.ceil(n / per)) if per else 1


class EpochSampler:
    """Draws without replacement from a reshuffled order, refilling as needed."""

    def __init__(self, items: list, rng: np.random.Generator):
        if not items:
            raise ValueError("cannot sample from an empty split")
        self.items = items
        self.rng = rng
        self._queue: list[int] = []

    def new_epoch(self) -> None:
        self._queue = list(self.rng.permutation(len(self.items)))

    def draw(self, k: int) -> list:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self._queue.pop(0)])
        return out


def _stack(samples: list[DomainSample]):
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples]) if samples[0].mask is not None else None
    return x, y


def compose_batch(samplers: dict[str, EpochSampler], config: TrainConfig):
    """Returns (batch_S, batch_T, batch_U) sample lists; None where a split is inactive."""
    counts = config.split_counts()
    for split in counts:
        if split not in samplers:
            raise ValueError(f"regime {config.regime} needs split {split} but it is empty or missing")
    out = []
    for split in ("S_L", "T_L", "T_U"):
        k = counts.get(split, 0)
        out.append(samplers[split].draw(k) if k else None)
    return tuple(out)


@dataclass
class TrainResult:
    network: SegNet
    teacher: TeacherState | None
    best_val_dice: float
    best_epoch: int
    final_val_dice: float
    teacher_val_dice: float | None
    out_dir: Path | None


def _split_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, tag]))


def train(config: TrainConfig, dataset: Dataset, out_dir=None, net_config: NetworkConfig | None = None,
          config_text: str | None = None) -> TrainResult:
    """Run one regime end to end; writes log, checkpoints and summary to ``out_dir``."""
    config.validate()
    regime = config.regime
    counts = {s: dataset.count(s) for s in ("S_L", "T_L", "T_U", "T_val", "T_test")}
    for split in config.split_counts():
        if counts[split] == 0:
            raise ValueError(f"regime {regime} requires split {split}, which is empty")
    samplers = {}
    for tag, split in enumerate(("S_L", "T_L", "T_U")):
        if split in config.split_counts():
            samplers[split] = EpochSampler(dataset.load(split), _split_rng(config.seed, tag))
    val = dataset.load("T_val") if counts["T_val"] else []
    perturb_rng = _split_rng(config.seed, 99)

    net = SegNet(net_config or NetworkConfig(), seed=config.seed)
    teacher = TeacherState.from_student(net, config.ema_decay) if regime in TEACHER_REGIMES else None
    eval_domain = Domain.SOURCE if regime == "S-SUP" else Domain.TARGET
    if regime in ("VSBN", "SS-CADA"):
        params = net.all_parameters()
    else:
        params = net.parameters(eval_domain)
    net.zero_grad()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config_text is not None:
            (out / "config.resolved.txt").write_text(config_text)
        log_fh = open(out / "train_log.csv", "w")
        log_fh.write(LOG_HEADER + "\n")

    iters = iterations_per_epoch(config, counts)
    best_dice, best_epoch, val_dice = -1.0, -1, float("nan")
    global_it = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            t = rampup_time(epoch, config)
            lam = lambda_rampup(t, config.loss) if teacher is not None else 0.0
            for s in samplers.values():
                s.new_epoch()
            for _ in range(iters):
                bs, bt, bu = compose_batch(samplers, config)
                loss_s = supervised_loss(
                    net,
                    _stack(bs) if bs else None,
                    _stack(bt) if bt else None,
                    config.loss,
                    shared=regime == "JOINT",
                )
                loss_c = None
                if teacher is not None:
                    seeds = tuple(int(v) for v in perturb_rng.integers(0, 2 ** 31, size=2))
                    loss_c = consistency_step(_stack(bu)[0], net, teacher, config.perturb, seeds)
                loss = total_loss(loss_s, loss_c, t, config.loss)
                ls, lc, lt = loss_s.item(), (loss_c.item() if loss_c is not None else 0.0), loss.item()
                if not math.isfinite(lt):
                    ids = [s.id for b in (bs, bt, bu) if b for s in b]
                    if out is not None:
                        (out / "nan_snapshot.txt").write_text(
                            f"iter {global_it} epoch {epoch} loss_s {ls!r} loss_c {lc!r}\nbatch {' '.join(ids)}\n")
                    raise NumericalError(f"non-finite loss at iter {global_it} (epoch {epoch}); batch ids: {', '.join(ids)}")
                loss.backward()
                sgd_momentum_step(params, lr, config.momentum)
                if teacher is not None:
                    ema_update(teacher, target_view(net))
                if log_fh is not None:
                    log_fh.write(f"{global_it},{epoch},{lr!r},{lam!r},{ls!r},{lc!r},{lt!r}\n")
                global_it += 1
            if val:
                val_dice = mean_dice(net, val, eval_domain)
                log.info("%s epoch %d val dice %.4f", regime, epoch, val_dice)
                if val_dice > best_dice:
                    best_dice, best_epoch = val_dice, epoch
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", net)
    finally:
        if log_fh is not None:
            log_fh.close()

    teacher_dice = mean_dice(teacher.network, val) if (teacher is not None and val) else None
    if out is not None:
        save_checkpoint(out / "final.ckpt", net, teacher.state() if teacher is not None else None)
        if best_epoch < 0:
            save_checkpoint(out / "best.ckpt", net)
        lines = [f"regime = {regime}", f"seed = {config.seed}", f"iterations = {global_it}",
                 f"best_epoch = {best_epoch}", f"best_val_dice = {best_dice!r}", f"final_val_dice = {val_dice!r}"]
        if teacher_dice is not None:
            lines.append(f"teacher_final_val_dice = {teacher_dice!r}")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return TrainResult(net, teacher, best_dice, best_epoch, val_dice, teacher_dice, out)
