"""Per-batch BN statistics by domain, their 2-D PCA embedding and silhouette separability."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DomainSample
from .domain import Domain
from .tensor import no_grad

DEPTH_CLASSES = ("shallow", "intermediate", "deep")


@dataclass(frozen=True)
class BnStatRecord:
    layer_id: str
    depth_class: str
    domain: Domain
    vector: np.ndarray  # batch mean per channel followed by batch std per channel


def collect_bn_stats(network, source_samples: list[DomainSample], target_samples: list[DomainSample],
                     n_batches: int, seed: int = 0, batch_size: int = 6,
                     source_network=None) -> list[BnStatRecord]:
    """TRAIN-mode forwards on a disposable copy; pre-affine batch mu/sigma at three layers.

    With ``source_network`` given, SOURCE batches go through that network instead
    (the two-separate-networks protocol).
    """
    if n_batches < 2:
        raise ValueError("n_batches must be >= 2 per domain")
    if not source_samples or not target_samples:
        raise ValueError("collect_bn_stats needs nonempty source and target splits")
    nets = {Domain.SOURCE: (source_network or network).copy(), Domain.TARGET: network.copy()}
    pools = {Domain.SOURCE: source_samples, Domain.TARGET: target_samples}
    records = []
    for tag, domain in enumerate((Domain.SOURCE, Domain.TARGET)):
        net, pool = nets[domain], pools[domain]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
        k = min(batch_size, len(pool))
        layers = {cls: net.analysis_layers[cls] for cls in DEPTH_CLASSES}
        for _ in range(n_batches):
            idx = rng.choice(len(pool), size=k, replace=False)
            x = np.stack([pool[i].image for i in idx])
            with no_grad():
                net.predict(x, domain, train=True)
            for cls, bn in layers.items():
                mu, sd = bn.last_batch_stats
                records.append(BnStatRecord(bn.name, cls, domain, np.concatenate([mu, sd])))
    return records


def pca_embed_2d(vectors) -> np.ndarray:
    """Projection of centred rows onto the top-2 principal axes.

    Each axis sign is fixed so its largest-magnitude loading is positive.
    Zero-variance input maps to all-zero points.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca_embed_2d needs at least 3 equal-length vectors")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        return np.zeros((x.shape[0], 2))
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    axes = evecs[:, order]
    if axes.shape[1] < 2:
        axes = np.hstack([axes, np.zeros((axes.shape[0], 2 - axes.shape[1]))])
    for j in range(axes.shape[1]):
        col = axes[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            axes[:, j] = -col
    return xc @ axes


def silhouette_separability(points, labels) -> float:
    """Mean silhouette coefficient (Euclidean) over all points."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    lab = np.asarray([str(v) for v in labels])
    if len(lab) != len(p):
        raise ValueError("points and labels differ in length")
    uniq, counts = np.unique(lab, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two labels")
    if counts.min() < 2:
        raise ValueError(f"label {uniq[np.argmin(counts)]!r} has fewer than 2 points")
    d = np.sqrt(np.maximum(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1), 0.0))
    member = lab[None, :] == uniq[:, None]  # (k, n)
    sums = member.astype(np.float64) @ d  # (k, n): distance sum from each point to each cluster
    own = np.searchsorted(uniq, lab)
    n = np.arange(len(p))
    a = sums[own, n] / (counts[own] - 1)
    mean_other = sums / counts[:, None]
    mean_other[own, n] = np.inf
    b = mean_other.min(axis=0)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def permuted_control(points, labels, n_perm: int = 10, seed: int = 0) -> float:
    """Silhouette averaged over random relabelings of the same points."""
    rng = np.random.default_rng(seed)
    lab = np.asarray(labels)
    return float(np.mean([silhouette_separability(points, rng.permutation(lab)) for _ in range(n_perm)]))


@dataclass
class LayerReport:
    depth_class: str
    layer_id: str
    silhouette: float
    control: float

    @property
    def margin(self) -> float:
        return self.silhouette - self.control


def analyze(records: list[BnStatRecord], out_dir=None, seed: int = 0) -> dict[str, LayerReport]:
    """Embed and score each depth class; optionally write the stat and embedding CSVs."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for cls in DEPTH_CLASSES:
        recs = [r for r in records if r.depth_class == cls]
        if not recs:
            continue
        vecs = np.stack([r.vector for r in recs])
        labels = [r.domain.value for r in recs]
        emb = pca_embed_2d(vecs)
        reports[cls] = LayerReport(cls, recs[0].layer_id, silhouette_separability(emb, labels),
                                   permuted_control(emb, labels, seed=seed))
        if out is not None:
            c2 = vecs.shape[1] // 2
            head = ",".join(["domain"] + [f"mu{i}" for i in range(c2)] + [f"sigma{i}" for i in range(c2)])
            rows = [head] + [",".join([lab] + [repr(float(v)) for v in vec]) for lab, vec in zip(labels, vecs)]
            (out / f"bnstats_{cls}.csv").write_text("\n".join(rows) + "\n")
            rows = ["x,y,domain"] + [f"{e[0]!r},{e[1]!r},{lab}" for e, lab in zip(emb.tolist(), labels)]
            (out / f"bnstats_{cls}_embed.csv").write_text("\n".join(rows) + "\n")
    return reports
