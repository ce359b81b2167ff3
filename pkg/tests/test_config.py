import random
from pathlib import Path

import pytest

from vesselda import config as cfgmod

DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


def test_default_file_matches_defaults():
    cfg = cfgmod.load(DEFAULT, cfgmod.GENERATE_SECTIONS + cfgmod.TRAIN_SECTIONS)
    assert cfgmod.config_hash(cfg) == cfgmod.config_hash(cfgmod.ExperimentConfig())
    assert cfg.data.as_splits() == {"S_L": 200, "T_L": 10, "T_U": 100, "T_val": 20, "T_test": 40}
    assert cfg.train.lr0 == 0.001 and cfg.train.ema_decay == 0.99 and cfg.train.loss.lambda_max == 0.1
    assert cfg.net.depth == 3 and cfg.net.base_channels == 8


def test_dump_parse_round_trip():
    cfg = cfgmod.ExperimentConfig()
    cfg.train.lr0 = 0.0123
    cfg.prep.source_only = False
    cfg.synth.target_style.noise_sigma = 0.07
    back = cfgmod.parse(cfgmod.dump(cfg), cfgmod.GENERATE_SECTIONS + cfgmod.TRAIN_SECTIONS)
    assert cfgmod.dump(back) == cfgmod.dump(cfg)


def test_hash_stable_under_reordering():
    lines = DEFAULT.read_text().splitlines()
    shuffled = lines[:]
    random.Random(3).shuffle(shuffled)
    a = cfgmod.parse("\n".join(lines))
    b = cfgmod.parse("\n".join(shuffled))
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    b.train.seed = 1
    assert cfgmod.config_hash(a) != cfgmod.config_hash(b)


def test_missing_key_named():
    text = "\n".join(l for l in DEFAULT.read_text().splitlines() if not l.startswith("train.momentum"))
    with pytest.raises(cfgmod.ConfigError, match="train.momentum"):
        cfgmod.parse(text, cfgmod.TRAIN_SECTIONS)
    cfgmod.parse(text, cfgmod.GENERATE_SECTIONS)


def test_unknown_and_malformed():
    with pytest.raises(cfgmod.ConfigError, match="train.lr"):
        cfgmod.parse("train.lr = 0.1")
    with pytest.raises(cfgmod.ConfigError, match="line 1"):
        cfgmod.parse("just words")
    with pytest.raises(cfgmod.ConfigError, match="train.epochs"):
        cfgmod.parse("train.epochs = many")
    with pytest.raises(cfgmod.ConfigError, match="prep.source_only"):
        cfgmod.parse("prep.source_only = yes")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("train.n_S = 5")


def test_comments_and_blank_lines():
    cfg = cfgmod.parse("# header\n\ntrain.epochs = 3  # short\n")
    assert cfg.train.epochs == 3
