"""Flat ``section.key = value`` experiment configuration.

Every dataclass field of the experiment is exposed under a dotted key, e.g.
``train.lr0 = 0.001`` or ``synth.target.noise_sigma = 0.06``. Parsing is
strict: unknown keys are rejected, and every key of a required section must
be present.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .data import PreprocessConfig, SynthConfig
from .segnet import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataCounts:
    n_SL: int = 200
    n_TL: int = 10
    n_TU: int = 100
    n_Tval: int = 20
    n_Ttest: int = 40

    def as_splits(self) -> dict[str, int]:
        return {"S_L": self.n_SL, "T_L": self.n_TL, "T_U": self.n_TU, "T_val": self.n_Tval, "T_test": self.n_Ttest}


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    prep: PreprocessConfig = field(default_factory=PreprocessConfig)
    data: DataCounts = field(default_factory=DataCounts)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def sections(self) -> dict[str, object]:
        return {
            "synth": self.synth,
            "synth.source": self.synth.source_style,
            "synth.target": self.synth.target_style,
            "prep": self.prep,
            "data": self.data,
            "net": self.net,
            "train": self.train,
            "loss": self.train.loss,
            "perturb": self.train.perturb,
        }


GENERATE_SECTIONS = ("synth", "synth.source", "synth.target", "prep", "data")
TRAIN_SECTIONS = ("net", "train", "loss", "perturb")


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def to_items(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    items = []
    for prefix, obj in cfg.sections().items():
        for f in _scalar_fields(obj):
            items.append((f"{prefix}.{f.name}", _format(getattr(obj, f.name))))
    return items


def dump(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the sorted resolved items; independent of key order in the file."""
    text = "\n".join(f"{k} = {v}" for k, v in sorted(to_items(cfg)))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse(text: str, required: tuple[str, ...] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    sections = cfg.sections()
    known = {}
    for prefix, obj in sections.items():
        for f in _scalar_fields(obj):
            known[f"{prefix}.{f.name}"] = (obj, f.name)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        obj, name = known[key]
        setattr(obj, name, _parse_value(raw, getattr(obj, name), key))
        seen.add(key)
    for key in known:
        prefix = key.rsplit(".", 1)[0]
        if prefix in required and key not in seen:
            raise ConfigError(f"missing config key {key!r}")
    try:
        cfg.synth.validate()
        cfg.net.validate()
        cfg.train.validate()
        cfg.train.loss.__post_init__()
        cfg.train.perturb.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path, required: tuple[str, ...] = ()) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), required)
