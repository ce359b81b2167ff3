import math
import shutil

import numpy as np
import pytest

from vesselda import trainer as trainer_mod
from vesselda.data import Dataset
from vesselda.domain import Domain
from vesselda.losses import LossConfig, lambda_rampup
from vesselda.segnet import NetworkConfig, SegNet, read_checkpoint
from vesselda.tensor import Parameter, Tensor
from vesselda.trainer import (
    EpochSampler, NumericalError, TrainConfig, compose_batch, iterations_per_epoch, lr_schedule, rampup_time,
    sgd_momentum_step, train,
)

NET = NetworkConfig(depth=2, base_channels=2)


def quick(regime, **kw):
    base = dict(regime=regime, epochs=2, iters_per_epoch=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_zero_gradient_noop():
    p = Parameter(np.array([1.5, -2.0]))
    sgd_momentum_step([p], 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_momentum_recurrence():
    p = Parameter(np.array([0.0]))
    p.grad[...] = 1.0
    sgd_momentum_step([p], 0.1, 0.9)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-15)
    p.grad[...] = 1.0
    sgd_momentum_step([p], 0.1, 0.9)
    assert p.data[0] == pytest.approx(-0.1 - 0.19, abs=1e-15)
    assert not p.grad.any()


def test_sgd_momentum_zero_is_vanilla(rng):
    p = Parameter(rng.normal(size=4))
    start = p.data.copy()
    for _ in range(3):
        g = rng.normal(size=4)
        p.grad[...] = g
        start -= 0.05 * g
        sgd_momentum_step([p], 0.05, 0.0)
    np.testing.assert_allclose(p.data, start, atol=1e-15)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(1, cfg) == pytest.approx(0.00095, abs=1e-18)
    vals = [lr_schedule(e, cfg) for e in range(cfg.epochs)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_schedule(cfg.epochs, cfg)


def test_rampup_time_endpoints():
    cfg = TrainConfig()
    assert rampup_time(0, cfg) == 0.0
    assert rampup_time(cfg.epochs - 1, cfg) == cfg.loss.t_max
    assert lambda_rampup(rampup_time(cfg.epochs - 1, cfg), cfg.loss) == 0.1


def test_iterations_per_epoch_default():
    counts = {"S_L": 200, "T_L": 10, "T_U": 100}
    assert iterations_per_epoch(TrainConfig(), counts) == math.ceil(110 / 4) == 28


def _samplers(cfg, sizes):
    r = np.random.default_rng(0)
    return {s: EpochSampler([f"{s}_{i}" for i in range(n)], r) for s, n in sizes.items() if s in cfg.split_counts()}


def test_compose_batch_compositions():
    sizes = {"S_L": 20, "T_L": 10, "T_U": 30}
    cfg = TrainConfig(regime="SS-CADA")
    bs, bt, bu = compose_batch(_samplers(cfg, sizes), cfg)
    assert (len(bs), len(bt), len(bu)) == (2, 2, 2)
    cfg = TrainConfig(regime="L-SUP")
    bs, bt, bu = compose_batch(_samplers(cfg, sizes), cfg)
    assert bs is None and bu is None and len(bt) == 6 and all(x.startswith("T_L") for x in bt)
    cfg = TrainConfig(regime="VSBN")
    bs, bt, bu = compose_batch(_samplers(cfg, sizes), cfg)
    assert len(bs) == 2 and len(bt) == 2 and bu is None


def test_compose_batch_missing_split():
    cfg = TrainConfig(regime="SS-CADA")
    with pytest.raises(ValueError, match="T_U"):
        compose_batch(_samplers(cfg, {"S_L": 3, "T_L": 3}), cfg)


def test_per_epoch_coverage():
    cfg = TrainConfig(regime="SS-CADA")
    samplers = _samplers(cfg, {"S_L": 200, "T_L": 10, "T_U": 100})
    iters = iterations_per_epoch(cfg, {"T_L": 10, "T_U": 100})
    for epoch in range(3):
        for s in samplers.values():
            s.new_epoch()
        seen = {}
        for _ in range(iters):
            _, bt, _ = compose_batch(samplers, cfg)
            for x in bt:
                seen[x] = seen.get(x, 0) + 1
        expected = math.ceil(iters * cfg.n_T / 10)
        assert len(seen) == 10
        assert all(abs(v - expected) <= 1 for v in seen.values())


def test_config_validation():
    with pytest.raises(ValueError, match="valid regimes"):
        TrainConfig(regime="NOPE").validate()
    with pytest.raises(ValueError):
        TrainConfig(n_S=3).validate()


def test_train_outputs_and_log(small_dataset, tmp_path):
    res = train(quick("SS-CADA"), Dataset(small_dataset), tmp_path, NET, "k = v\n")
    for name in ("final.ckpt", "best.ckpt", "train_log.csv", "config.resolved.txt", "summary.txt"):
        assert (tmp_path / name).exists()
    rows = (tmp_path / "train_log.csv").read_text().splitlines()
    assert rows[0] == "iter,epoch,lr,lambda,loss_s,loss_c,loss_total"
    assert len(rows) == 1 + 6
    lam = [float(r.split(",")[3]) for r in rows[1:]]
    assert abs(lam[0] - 0.1 * math.exp(-5)) < 1e-12 and abs(lam[-1] - 0.1) < 1e-12
    assert any(k.startswith("teacher.") for k in read_checkpoint(tmp_path / "final.ckpt"))
    assert "teacher_final_val_dice" in (tmp_path / "summary.txt").read_text()
    assert 0.0 <= res.best_val_dice <= 1.0


@pytest.mark.parametrize("regime", ["SS-CADA", "JOINT", "L-SUP"])
def test_train_deterministic(small_dataset, tmp_path, regime):
    for name in ("a", "b"):
        train(quick(regime), Dataset(small_dataset), tmp_path / name, NET)
    for f in ("final.ckpt", "best.ckpt", "train_log.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_lsup_never_reads_other_splits(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset, root)
    shutil.rmtree(root / "S_L")
    shutil.rmtree(root / "T_U")
    train(quick("L-SUP"), Dataset(root), tmp_path / "out", NET)


def test_sscada_requires_unlabeled(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset, root)
    lines = [l for l in (root / "manifest.tsv").read_text().splitlines() if "\tT_U\t" not in l]
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="T_U"):
        train(quick("SS-CADA"), Dataset(root), None, NET)


def _bn_state(net, domain, what):
    return [getattr(bn, what)[domain].data.copy() if what in ("gamma", "beta") else bn.__dict__[what][domain].copy()
            for bn in net.vsbn_layers]


def test_joint_uses_one_bn_group(small_dataset, monkeypatch):
    seen = []
    orig = SegNet.predict

    def spy(self, x, domain, train=False):
        if train:
            seen.append(Domain.parse(domain))
        return orig(self, x, domain, train)

    monkeypatch.setattr(SegNet, "predict", spy)
    res = train(quick("JOINT"), Dataset(small_dataset), None, NET)
    assert set(seen) == {Domain.TARGET}
    for bn in res.network.vsbn_layers:
        assert bn.num_batches[Domain.SOURCE] == 0
        np.testing.assert_array_equal(bn.gamma[Domain.SOURCE].data, 1.0)
        np.testing.assert_array_equal(bn.beta[Domain.SOURCE].data, 0.0)


def test_sscada_consistency_never_moves_source_bn(small_dataset, monkeypatch):
    # drop the supervised source term: gamma_S / beta_S must then stay at init
    from vesselda import losses

    orig = losses.supervised_loss

    def target_only(network, batch_s, batch_t, config=None, shared=False):
        return orig(network, None, batch_t, config, shared)

    monkeypatch.setattr(trainer_mod, "supervised_loss", target_only)
    res = train(quick("SS-CADA", loss=LossConfig(lambda_max=5.0)), Dataset(small_dataset), None, NET)
    for bn in res.network.vsbn_layers:
        np.testing.assert_array_equal(bn.gamma[Domain.SOURCE].data, 1.0)
        np.testing.assert_array_equal(bn.beta[Domain.SOURCE].data, 0.0)


def test_sscada_source_part_moves_source_bn(small_dataset):
    res = train(quick("SS-CADA"), Dataset(small_dataset), None, NET)
    assert any(not np.all(bn.gamma[Domain.SOURCE].data == 1.0) for bn in res.network.vsbn_layers)


def test_nan_aborts_with_snapshot(small_dataset, tmp_path, monkeypatch):
    def bad(*a, **k):
        return Tensor(np.array(float("nan")))

    monkeypatch.setattr(trainer_mod, "supervised_loss", bad)
    with pytest.raises(NumericalError, match="batch ids"):
        train(quick("L-SUP"), Dataset(small_dataset), tmp_path, NET)
    snap = (tmp_path / "nan_snapshot.txt").read_text()
    assert "T_L_" in snap
