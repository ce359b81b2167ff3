"""Segmentation and consistency losses plus the Gaussian ramp-up weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import Domain
from .tensor import Tensor, batch_slice, make_op

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    dice_smooth: float = 1.0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    lambda_max: float = 0.1
    t_max: int = 50

    def __post_init__(self):
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")


def _target_array(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)


def binary_cross_entropy(p: Tensor, y) -> Tensor:
    """Mean pixelwise BCE on probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = _target_array(y)
    if p.shape != y.shape:
        raise ValueError(f"bce: shape mismatch {p.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: targets must be binary {0, 1}")
    pc = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    n = p.data.size
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    inside = (p.data > PROB_CLAMP) & (p.data < 1 - PROB_CLAMP)

    def backward(g):
        return (float(g) * inside * (-(y / pc) + (1 - y) / (1 - pc)) / n,)

    return make_op(np.array(loss), (p,), backward)


def soft_dice_loss(p: Tensor, y, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s) per sample, averaged over the batch."""
    y = _target_array(y)
    if p.shape != y.shape:
        raise ValueError(f"dice: shape mismatch {p.shape} vs {y.shape}")
    n = p.shape[0]
    axes = tuple(range(1, p.data.ndim))
    inter = (p.data * y).sum(axis=axes)
    denom = p.data.sum(axis=axes) + y.sum(axis=axes) + smooth
    num = 2 * inter + smooth
    loss = (1 - num / denom).mean()

    def backward(g):
        # d/dp of -(num/denom): -(2y*denom - num) / denom^2
        shape = (n,) + (1,) * (p.data.ndim - 1)
        coef = (float(g) / n) / denom ** 2
        return (-(2 * y * denom.reshape(shape) - num.reshape(shape)) * coef.reshape(shape),)

    return make_op(np.array(loss), (p,), backward)


def hybrid_seg_loss(p: Tensor, y, config: LossConfig | None = None) -> Tensor:
    config = config or LossConfig()
    total = binary_cross_entropy(p, y) * config.ce_weight
    if config.dice_weight:
        total = total + soft_dice_loss(p, y, config.dice_smooth) * config.dice_weight
    return total


def consistency_mse(p_student: Tensor, p_teacher) -> Tensor:
    """Mean squared difference; the teacher side is a constant (no gradient)."""
    pt = _target_array(p_teacher)
    if p_student.shape != pt.shape:
        raise ValueError(f"mse: shape mismatch {p_student.shape} vs {pt.shape}")
    diff = p_student.data - pt
    n = diff.size
    return make_op(np.array((diff ** 2).mean()), (p_student,), lambda g: (float(g) * 2 * diff / n,))


def lambda_rampup(t: float, config: LossConfig | None = None) -> float:
    """lambda_max * exp(-5 * (1 - t / t_max)^2) for 0 <= t <= t_max."""
    config = config or LossConfig()
    if not 0 <= t <= config.t_max:
        raise ValueError(f"ramp-up time {t} outside [0, {config.t_max}]")
    return config.lambda_max * math.exp(-5.0 * (1.0 - t / config.t_max) ** 2)


def total_loss(loss_s: Tensor, loss_c: Tensor | None, t: float, config: LossConfig | None = None) -> Tensor:
    if loss_c is None:
        return loss_s
    return loss_s + loss_c * lambda_rampup(t, config)


def supervised_loss(network, batch_s, batch_t, config: LossConfig | None = None, shared: bool = False) -> Tensor:
    """Sum of the per-domain mean hybrid losses.

    ``batch_s`` / ``batch_t`` are ``(images, masks)`` pairs or None. Source
    images go through the SOURCE parameter view and target images through the
    TARGET view. With ``shared`` both batches are normalized together as one
    TARGET-tagged batch (the joint-training baseline).
    """
    config = config or LossConfig()
    present = [(b, dom) for b, dom in ((batch_s, Domain.SOURCE), (batch_t, Domain.TARGET))
               if b is not None and len(b[0])]
    if not present:
        raise ValueError("supervised_loss: both batches are empty")
    if shared and len(present) == 2:
        (xs, ys), (xt, yt) = batch_s, batch_t
        pred = network.predict(np.concatenate([xs, xt]), Domain.TARGET, train=True)
        ns = len(xs)
        return (hybrid_seg_loss(batch_slice(pred, 0, ns), ys, config)
                + hybrid_seg_loss(batch_slice(pred, ns, pred.shape[0]), yt, config))
    total = None
    for (x, y), dom in present:
        term = hybrid_seg_loss(network.predict(x, Domain.TARGET if shared else dom, train=True), y, config)
        total = term if total is None else total + term
    return total
