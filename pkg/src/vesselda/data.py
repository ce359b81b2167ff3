"""Synthetic two-domain vessel images, preprocessing, netpbm I/O and datasets.

Source images mimic fundus photographs (green channel): dark crisp vessels on
a bright vignetted background with an optic-disc highlight. Target images
mimic angiograms: vessel contrast fades with branch generation over a smooth
semi-transparent background with heavier noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .domain import Domain

SPLITS = ("S_L", "T_L", "T_U", "T_val", "T_test")
SPLIT_DOMAIN = {"S_L": Domain.SOURCE, "T_L": Domain.TARGET, "T_U": Domain.TARGET,
                "T_val": Domain.TARGET, "T_test": Domain.TARGET}
UNLABELED_SPLITS = ("T_U",)
MANIFEST_NAME = "manifest.tsv"


@dataclass
class SourceStyle:
    vessel_intensity: float = 0.25
    background: float = 0.72
    vignette_strength: float = 0.45
    noise_sigma: float = 0.02
    texture_sigma: float = 0.04
    disc_intensity: float = 0.2


@dataclass
class TargetStyle:
    vessel_contrast: float = 0.32
    vessel_contrast_decay: float = 0.7
    background: float = 0.55
    background_texture_sigma: float = 0.12
    noise_sigma: float = 0.06


@dataclass
class SynthConfig:
    size: int = 64
    n_trees_min: int = 2
    n_trees_max: int = 3
    branch_prob: float = 0.09
    radius_min: float = 1.0
    radius_max: float = 2.6
    step: float = 1.5
    taper: float = 0.985
    seed: int = 0
    source_style: SourceStyle = field(default_factory=SourceStyle)
    target_style: TargetStyle = field(default_factory=TargetStyle)

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.radius_min < 1.0 or self.radius_max < self.radius_min:
            raise ValueError("radii must satisfy 1 <= radius_min <= radius_max")
        if not 1 <= self.n_trees_min <= self.n_trees_max:
            raise ValueError("need 1 <= n_trees_min <= n_trees_max")
        if not 0 <= self.branch_prob <= 1:
            raise ValueError("branch_prob must lie in [0, 1]")


@dataclass
class PreprocessConfig:
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    gamma: float = 1.2
    source_only: bool = True


@dataclass
class VesselTree:
    """Rasterized tree: binary mask, per-pixel branch generation (-1 off-vessel), root (row, col)."""

    mask: np.ndarray
    generation: np.ndarray
    root: tuple[int, int]
    coverage: np.ndarray


@dataclass
class DomainSample:
    image: np.ndarray
    mask: np.ndarray | None
    domain: Domain
    id: str

    @property
    def labeled(self) -> bool:
        return self.mask is not None


# ---------------------------------------------------------------- vessel trees


def _grow(cfg: SynthConfig, rng: np.random.Generator):
    """Random branching walk; returns segments (y0, x0, y1, x1, radius, generation) and the root."""
    size = cfg.size
    side = rng.integers(4)
    along = rng.uniform(0.25, 0.75) * (size - 1)
    # root on the border, trunks pointing inward
    root, heading = {
        0: ((0.0, along), math.pi / 2),
        1: ((size - 1.0, along), -math.pi / 2),
        2: ((along, 0.0), 0.0),
        3: ((along, size - 1.0), math.pi),
    }[int(side)]
    segments = []
    stack = []
    for _ in range(int(rng.integers(cfg.n_trees_min, cfg.n_trees_max + 1))):
        stack.append((root[0], root[1], heading + rng.uniform(-0.9, 0.9), cfg.radius_max * rng.uniform(0.85, 1.0), 0))
    budget = 4000
    while stack and budget > 0:
        y, x, ang, r, gen = stack.pop()
        drift = rng.normal(0, 0.04)
        while r >= cfg.radius_min and budget > 0:
            budget -= 1
            ang += drift + rng.normal(0, 0.18)
            ny, nx = y + cfg.step * math.sin(ang), x + cfg.step * math.cos(ang)
            segments.append((y, x, ny, nx, r, gen))
            if not (0 <= ny <= size - 1 and 0 <= nx <= size - 1):
                break
            y, x = ny, nx
            r *= cfg.taper
            if rng.random() < cfg.branch_prob and r * 0.8 >= cfg.radius_min:
                side_sign = 1 if rng.random() < 0.5 else -1
                stack.append((y, x, ang + side_sign * rng.uniform(0.5, 1.1), r * 0.8, gen + 1))
                r *= 0.92
    return segments, (int(round(root[0])), int(round(root[1])))


def _rasterize(segments, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    coverage = np.zeros((size, size))
    generation = np.full((size, size), -1, dtype=np.int64)
    best_dist = np.full((size, size), np.inf)
    for y0, x0, y1, x1, r, gen in segments:
        lo_y, hi_y = int(max(0, math.floor(min(y0, y1) - r - 2))), int(min(size, math.ceil(max(y0, y1) + r + 3)))
        lo_x, hi_x = int(max(0, math.floor(min(x0, x1) - r - 2))), int(min(size, math.ceil(max(x0, x1) + r + 3)))
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        py, px = yy[lo_y:hi_y, lo_x:hi_x], xx[lo_y:hi_y, lo_x:hi_x]
        dy, dx = y1 - y0, x1 - x0
        seg_len2 = dy * dy + dx * dx
        t = np.clip(((py - y0) * dy + (px - x0) * dx) / seg_len2, 0.0, 1.0) if seg_len2 > 0 else 0.0
        d = np.hypot(py - (y0 + t * dy), px - (x0 + t * dx))
        cov = np.clip(r + 0.5 - d, 0.0, 1.0)
        sub = coverage[lo_y:hi_y, lo_x:hi_x]
        np.maximum(sub, cov, out=sub)
        rel = d - r
        closer = rel < best_dist[lo_y:hi_y, lo_x:hi_x]
        best_dist[lo_y:hi_y, lo_x:hi_x][closer] = rel[closer]
        generation[lo_y:hi_y, lo_x:hi_x][closer] = gen
    mask = (coverage >= 0.5).astype(np.float64)
    generation[mask == 0] = -1
    return mask, generation, coverage


def generate_vessel_tree(config: SynthConfig, seed) -> VesselTree:
    """Deterministic tree for ``seed``; retries up to 10 times on an empty mask."""
    config.validate()
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [int(seed)])
    for attempt in range(10):
        rng = np.random.default_rng(ss.spawn(1)[0] if attempt else ss)
        segments, root = _grow(config, rng)
        mask, generation, coverage = _rasterize(segments, config.size)
        if mask.any():
            return VesselTree(mask[None], generation, root, coverage)
    raise ValueError("vessel tree generation produced an empty mask after 10 attempts")


# ---------------------------------------------------------------- rendering


def _smooth_field(rng: np.random.Generator, size: int, sigma_px: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma_px, mode="wrap")
    return f / (f.std() + 1e-12)


def render_source(tree: VesselTree, config: SynthConfig, seed) -> np.ndarray:
    st = config.source_style
    rng = np.random.default_rng(seed)
    size = config.size
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    background = st.background + st.texture_sigma * _smooth_field(rng, size, size / 10)
    background *= 1.0 - st.vignette_strength * (yy ** 2 + xx ** 2) / 0.5
    ry, rx = tree.root
    disc = np.exp(-((np.arange(size)[:, None] - ry) ** 2 + (np.arange(size)[None, :] - rx) ** 2) / (2 * (size / 12) ** 2))
    background += st.disc_intensity * disc
    img = background + (st.vessel_intensity - background) * tree.coverage
    if st.noise_sigma > 0:
        img = img + rng.normal(0, st.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def render_target(tree: VesselTree, config: SynthConfig, seed) -> np.ndarray:
    st = config.target_style
    rng = np.random.default_rng(seed)
    size = config.size
    background = st.background + st.background_texture_sigma * _smooth_field(rng, size, size / 6)
    # semi-transparent overlapping structures: a couple of broad soft bands
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(2):
        ang = rng.uniform(0, math.pi)
        off = rng.uniform(0.2, 0.8) * size
        dist = (yy - size / 2) * math.cos(ang) - (xx - size / 2) * math.sin(ang) + size / 2 - off
        background -= rng.uniform(0.04, 0.1) / (1 + np.exp(-dist / 2.5))
    gen = np.maximum(tree.generation, 0)
    contrast = st.vessel_contrast * st.vessel_contrast_decay ** gen
    img = background - contrast * tree.coverage
    if st.noise_sigma > 0:
        img = img + rng.normal(0, st.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


# ---------------------------------------------------------------- preprocessing


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return np.power(image, gamma)


def _tile_lut(tile_bins: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile_bins.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        return np.arange(256) / 255.0
    if math.isfinite(clip_limit):
        clip = clip_limit * tile_bins.size / 256.0
        excess = np.maximum(hist - clip, 0.0).sum()
        hist = np.minimum(hist, clip) + excess / 256.0
    cdf = np.cumsum(hist)
    return cdf / cdf[-1]


def clahe(image: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast limited adaptive histogram equalization on a [0, 1] image.

    Bins are ``round(255 * x)``; each tile maps a bin to its (clipped) CDF.
    Tiles with a single occupied bin map by identity. Per-tile mappings are
    blended bilinearly between tile centres.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    h, w = img.shape
    if tiles < 1 or h % tiles or w % tiles:
        raise ValueError(f"tiles={tiles} must divide image size {h}x{w}")
    th, tw = h // tiles, w // tiles
    bins = np.clip(np.rint(img * 255), 0, 255).astype(np.int64)
    luts = np.empty((tiles, tiles, 256))
    for i in range(tiles):
        for j in range(tiles):
            luts[i, j] = _tile_lut(bins[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip_limit)

    def axis_weights(n, t):
        pos = (np.arange(n) + 0.5) / t - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, tiles - 1)
        hi = np.minimum(lo + 1, tiles - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        frac[hi == lo] = 0.0
        return lo, hi, frac

    y0, y1, fy = axis_weights(h, th)
    x0, x1, fx = axis_weights(w, tw)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    # nested lerps: equal corner values blend to exactly that value
    top = luts[Y0, X0, bins] + FX * (luts[Y0, X1, bins] - luts[Y0, X0, bins])
    bottom = luts[Y1, X0, bins] + FX * (luts[Y1, X1, bins] - luts[Y1, X0, bins])
    out = top + FY * (bottom - top)
    out = np.clip(out, 0.0, 1.0)
    return out[None] if squeeze else out


def preprocess(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    return gamma_correct(clahe(image, config.clahe_tiles, config.clahe_clip), config.gamma)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    img2 = img[0] if img.ndim == 3 else img
    if img2.shape != (size, size):
        img2 = ndimage.zoom(img2, (size / img2.shape[0], size / img2.shape[1]), order=1, mode="nearest", grid_mode=True)
    img2 = np.clip(img2, 0.0, 1.0)
    return img2[None] if img.ndim == 3 else img2


# ---------------------------------------------------------------- netpbm


def _read_header(buf: bytes, path) -> tuple[str, int, int, int, int]:
    """Parse magic, width, height, maxval; returns them and the payload offset."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed netpbm header, ended at byte offset {pos}")
        tokens.append((buf[start:pos], start))
    magic = tokens[0][0].decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise ValueError(f"{path}: unsupported magic {magic!r} at byte offset 0 (need P5 or P6)")
    vals = []
    for tok, off in tokens[1:]:
        try:
            vals.append(int(tok))
        except ValueError:
            raise ValueError(f"{path}: malformed header field {tok!r} at byte offset {off}") from None
    width, height, maxval = vals
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported dimensions/maxval {width}x{height}/{maxval} (8-bit only)")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= n:
        raise ValueError(f"{path}: header not terminated at byte offset {pos}")
    return magic, width, height, maxval, pos + 1


def load_image(path, take_green: bool = False) -> np.ndarray:
    """Read an 8-bit P5/P6 file as a (1, H, W) float array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _read_header(buf, path)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise ValueError(f"{path}: truncated payload at byte offset {offset + len(payload)}: "
                         f"expected {need} bytes from offset {offset}, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 3:
        rgb = arr.reshape(height, width, 3)
        gray = rgb[..., 1] if take_green else rgb @ np.array([0.299, 0.587, 0.114])
    else:
        gray = arr.reshape(height, width)
    return gray[None]


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def save_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    img = img[0] if img.ndim == 3 else img
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(img).tobytes())


def save_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


# ---------------------------------------------------------------- datasets


DEFAULT_COUNTS = {"S_L": 200, "T_L": 10, "T_U": 100, "T_val": 20, "T_test": 40}


def sample_seed(master: int, split: str, index: int) -> list[int]:
    return [int(master), SPLITS.index(split), int(index)]


def synth_sample(config: SynthConfig, split: str, index: int, master_seed: int,
                 prep: PreprocessConfig | None = None) -> DomainSample:
    seed = sample_seed(master_seed, split, index)
    tree = generate_vessel_tree(config, seed)
    domain = SPLIT_DOMAIN[split]
    render_seed = seed + [1]
    if domain is Domain.SOURCE:
        image = render_source(tree, config, render_seed)
    else:
        image = render_target(tree, config, render_seed)
    if prep is not None and (domain is Domain.SOURCE or not prep.source_only):
        image = preprocess(image, prep)
    mask = None if split in UNLABELED_SPLITS else tree.mask
    return DomainSample(image=image, mask=mask, domain=domain, id=f"{split}_{index:04d}")


def make_dataset(root, config: SynthConfig, counts: dict[str, int] | None = None,
                 prep: PreprocessConfig | None = None) -> Path:
    """Write every split as PGM files plus ``manifest.tsv`` under ``root``."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    for split, n in counts.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if n < 0:
            raise ValueError(f"negative count for {split}")
    root = Path(root)
    lines = []
    try:
        for split in SPLITS:
            n = counts.get(split, 0)
            if n:
                (root / split).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                s = synth_sample(config, split, i, config.seed, prep)
                img_rel = f"{split}/{s.id}.pgm"
                save_pgm(root / img_rel, s.image)
                mask_rel = "-"
                if s.mask is not None:
                    mask_rel = f"{split}/{s.id}_mask.pgm"
                    save_pgm(root / mask_rel, s.mask)
                lines.append(f"{s.id}\t{split}\t{s.domain.value}\t{img_rel}\t{mask_rel}\n")
        (root / MANIFEST_NAME).write_text("".join(lines))
    except OSError as exc:
        raise OSError(f"dataset write failed under {root}: {exc}") from exc
    return root


@dataclass
class ManifestEntry:
    id: str
    split: str
    domain: Domain
    image_path: str
    mask_path: str | None


class Dataset:
    """Manifest-backed dataset; splits are read from disk only when requested."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {self.root}")
        self.entries: dict[str, list[ManifestEntry]] = {s: [] for s in SPLITS}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            sid, split, dom, img, mask = parts
            if split not in self.entries:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            self.entries[split].append(ManifestEntry(sid, split, Domain.parse(dom), img, None if mask == "-" else mask))
        self._cache: dict[str, list[DomainSample]] = {}

    def count(self, split: str) -> int:
        return len(self.entries[split])

    def load(self, split: str) -> list[DomainSample]:
        if split not in self._cache:
            samples = []
            for e in self.entries[split]:
                image = load_image(self.root / e.image_path)
                mask = None
                if e.mask_path is not None:
                    mask = (load_image(self.root / e.mask_path) >= 0.5).astype(np.float64)
                samples.append(DomainSample(image, mask, e.domain, e.id))
            self._cache[split] = samples
        return self._cache[split]


def ingest_images(paths, out_root, split: str, size: int = 64, mask_paths=None,
                  prep: PreprocessConfig | None = None, append: bool = True) -> list[str]:
    """Add user-supplied P5/P6 images (and optional masks) to a dataset.

    Source images take the green channel and are preprocessed with CLAHE and
    gamma correction; everything is resized bilinearly to ``size``.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    domain = SPLIT_DOMAIN[split]
    prep = prep or PreprocessConfig()
    out_root = Path(out_root)
    (out_root / split).mkdir(parents=True, exist_ok=True)
    if mask_paths is not None and len(mask_paths) != len(paths):
        raise ValueError("mask_paths must match paths one-to-one")
    lines, ids = [], []
    for i, p in enumerate(paths):
        img = resize_bilinear(load_image(p, take_green=domain is Domain.SOURCE), size)
        if domain is Domain.SOURCE or not prep.source_only:
            img = preprocess(img, prep)
        sid = f"{split}_{Path(p).stem}"
        img_rel = f"{split}/{sid}.pgm"
        save_pgm(out_root / img_rel, img)
        mask_rel = "-"
        if mask_paths is not None and split not in UNLABELED_SPLITS:
            m = (resize_bilinear(load_image(mask_paths[i]), size) >= 0.5).astype(np.float64)
            mask_rel = f"{split}/{sid}_mask.pgm"
            save_pgm(out_root / mask_rel, m)
        lines.append(f"{sid}\t{split}\t{domain.value}\t{img_rel}\t{mask_rel}\n")
        ids.append(sid)
    with open(out_root / MANIFEST_NAME, "a" if append else "w") as fh:
        fh.writelines(lines)
    return ids
