"""Recall / precision / Dice, overlay rendering and split evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DomainSample, save_ppm
from .domain import Domain
from .tensor import no_grad

TP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)
FP_COLOR = (255, 165, 0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary")
    return a.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _check_binary(pred_mask, "pred_mask")
    gt = _check_binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def metrics(counts: ConfusionCounts) -> dict[str, float]:
    """0/0 evaluates to 1.0 (nothing to find and nothing predicted)."""
    return {
        "recall": _ratio(counts.tp, counts.tp + counts.fn),
        "precision": _ratio(counts.tp, counts.tp + counts.fp),
        "dice": _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
    }


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob_map) >= threshold).astype(np.float64)


def _plane(a) -> np.ndarray:
    a = np.asarray(a)
    return a[0] if a.ndim == 3 and a.shape[0] == 1 else a


def render_overlay(pred_mask, gt_mask, base_image) -> np.ndarray:
    """(H, W, 3) uint8: TP green, FN red, FP orange, TN the grey base image."""
    pred = _check_binary(_plane(pred_mask), "pred_mask")
    gt = _check_binary(_plane(gt_mask), "gt_mask")
    base = _plane(base_image).astype(np.float64)
    if not pred.shape == gt.shape == base.shape:
        raise ValueError(f"overlay shapes differ: {pred.shape}, {gt.shape}, {base.shape}")
    grey = np.clip(np.rint(base * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    rgb[pred & gt] = TP_COLOR
    rgb[~pred & gt] = FN_COLOR
    rgb[pred & ~gt] = FP_COLOR
    return rgb


@dataclass
class EvalReport:
    rows: list[tuple[str, dict[str, float]]]

    def _column(self, key: str) -> np.ndarray:
        return np.array([m[key] for _, m in self.rows])

    def mean(self) -> dict[str, float]:
        return {k: float(self._column(k).mean()) for k in ("recall", "precision", "dice")}

    def std(self) -> dict[str, float]:
        # population std
        return {k: float(self._column(k).std()) for k in ("recall", "precision", "dice")}

    def to_csv(self) -> str:
        lines = ["id,recall,precision,dice"]
        for sid, m in self.rows:
            lines.append(f"{sid},{m['recall']:.4f},{m['precision']:.4f},{m['dice']:.4f}")
        mu, sd = self.mean(), self.std()
        cells = ",".join(f"{mu[k]:.4f}±{sd[k]:.4f}" for k in ("recall", "precision", "dice"))
        lines.append(f"MEAN±STD,{cells}")
        return "\n".join(lines) + "\n"


def predict_probs(network, images: np.ndarray, domain=Domain.TARGET, batch: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(network.predict(images[i:i + batch], domain, train=False).data)
    return np.concatenate(out)


def mean_dice(network, samples: list[DomainSample], domain=Domain.TARGET) -> float:
    probs = predict_probs(network, np.stack([s.image for s in samples]), domain)
    return float(np.mean([metrics(confusion(binarize(p), s.mask))["dice"] for p, s in zip(probs, samples)]))


def evaluate_split(network, samples: list[DomainSample], domain=Domain.TARGET, report_path=None,
                   overlay_dir=None) -> EvalReport:
    """EVAL-mode metrics for every sample; optionally writes CSV and overlay PPMs."""
    if not samples:
        raise ValueError("evaluate_split: empty split")
    if any(s.mask is None for s in samples):
        raise ValueError("evaluate_split: split is unlabeled")
    probs = predict_probs(network, np.stack([s.image for s in samples]), domain)
    rows = []
    if overlay_dir is not None:
        Path(overlay_dir).mkdir(parents=True, exist_ok=True)
    for p, s in zip(probs, samples):
        pred = binarize(p)
        rows.append((s.id, metrics(confusion(pred, s.mask))))
        if overlay_dir is not None:
            save_ppm(Path(overlay_dir) / f"{s.id}_overlay.ppm", render_overlay(pred, s.mask, s.image))
    report = EvalReport(rows)
    if report_path is not None:
        Path(report_path).write_text(report.to_csv(), encoding="utf-8")
    return report
