import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batchnorm_loops
from vesselda.domain import Domain
from vesselda.segnet import NetworkConfig, SegNet
from vesselda.tensor import Parameter, Tensor, finite_diff_check, sum_all
from vesselda.vsbn import VsbnLayer, domain_param_isolation_check

S, T = Domain.SOURCE, Domain.TARGET


def layer_with(channels, gamma, beta, domain=S):
    bn = VsbnLayer(channels, "t")
    bn.gamma[domain].data[...] = gamma
    bn.beta[domain].data[...] = beta
    return bn


def test_hand_case_one_three():
    bn = layer_with(1, 2.0, 1.0)
    out = bn(Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2)), S, train=True).data.ravel()
    # mu = 2, var = 1: 2 * (+-1) / sqrt(1 + 1e-5) + 1
    np.testing.assert_allclose(out, [1 - 2 / np.sqrt(1 + 1e-5), 1 + 2 / np.sqrt(1 + 1e-5)], atol=1e-15)
    np.testing.assert_allclose(out, [-0.99999, 2.99999], atol=1e-5)


def test_matches_loop_oracle(rng):
    for _ in range(5):
        x = rng.normal(2.0, 3.0, size=(3, 4, 5, 2))
        g, b = rng.normal(size=4), rng.normal(size=4)
        bn = layer_with(4, g, b, T)
        np.testing.assert_allclose(bn(Tensor(x), T, True).data, batchnorm_loops(x, g, b, 1e-5), rtol=0, atol=1e-10)


def test_constant_channel_outputs_beta(rng):
    bn = layer_with(2, rng.normal(size=2), [0.3, -2.0])
    x = np.full((2, 2, 3, 3), 7.25)
    out = bn(Tensor(x), S, True).data
    assert np.all(out[:, 0] == 0.3) and np.all(out[:, 1] == -2.0)


def test_unit_affine_moments(rng):
    x = rng.normal(1.0, 0.01, size=(4, 3, 4, 4))
    out = VsbnLayer(3, "t")(Tensor(x), S, True).data
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
def test_shift_invariance(seed, shift):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3, 3, 3))
    bn = layer_with(3, r.normal(size=3), r.normal(size=3))
    a = bn(Tensor(x), S, True).data
    b = bn(Tensor(x + shift * np.arange(1, 4)[None, :, None, None]), S, True).data
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_running_stats_only_for_tag(rng):
    bn = VsbnLayer(2, "t")
    x = rng.normal(3.0, 2.0, size=(2, 2, 3, 3))
    bn(Tensor(x), S, True)
    assert np.all(bn.running_mean[T] == 0) and np.all(bn.running_var[T] == 1) and bn.num_batches[T] == 0
    m = x.size // 2
    np.testing.assert_allclose(bn.running_mean[S], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var[S], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_eval_uses_running_stats(rng):
    bn = layer_with(1, 1.7, 0.4, T)
    bn.running_mean[T][...] = 2.0
    bn.running_var[T][...] = 0.25
    bn.num_batches[T] = 1
    x = np.array([2.0, 2.5]).reshape(2, 1, 1, 1)
    out = bn(Tensor(x), T, False).data.ravel()
    assert out[0] == pytest.approx(0.4, abs=1e-15)
    assert out[1] == pytest.approx(1.7 * 0.5 / np.sqrt(0.25 + 1e-5) + 0.4, abs=1e-14)


def test_eval_permutation_equivariant(rng):
    bn = VsbnLayer(2, "t")
    bn(Tensor(rng.normal(size=(4, 2, 3, 3))), T, True)
    x = rng.normal(size=(5, 2, 3, 3))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(bn(Tensor(x[perm]), T, False).data, bn(Tensor(x), T, False).data[perm])


def test_eval_without_stats_raises():
    with pytest.raises(RuntimeError, match="no statistics for domain TARGET"):
        VsbnLayer(1, "t")(Tensor(np.zeros((1, 1, 2, 2))), T, False)


def test_single_value_batch_rejected():
    with pytest.raises(ValueError):
        VsbnLayer(1, "t")(Tensor(np.zeros((1, 1, 1, 1))), S, True)


def test_identical_domains_identical_outputs(rng):
    bn = VsbnLayer(3, "t")
    for d in (S, T):
        bn.gamma[d].data[...] = [0.5, 1.5, -1.0]
        bn.beta[d].data[...] = [0.1, 0.2, 0.3]
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(bn(Tensor(x), S, True).data, bn(Tensor(x), T, True).data)
    np.testing.assert_array_equal(bn(Tensor(x), S, False).data, bn(Tensor(x), T, False).data)


@pytest.mark.parametrize("train", [True, False])
def test_full_backward_finite_diff(rng, train):
    bn = VsbnLayer(3, "t")
    bn(Tensor(rng.normal(size=(2, 3, 4, 4))), T, True)
    bn.gamma[T].data[...] = rng.normal(size=3)
    bn.beta[T].data[...] = rng.normal(size=3)
    x = Parameter(rng.normal(size=(2, 3, 4, 4)))
    w = rng.normal(size=(2, 3, 4, 4))
    mom = bn.stat_momentum
    bn.stat_momentum = 0.0  # keep repeated evaluations identical
    err = finite_diff_check(lambda: sum_all(bn(x, T, train) * w), [x, bn.gamma[T], bn.beta[T]])
    bn.stat_momentum = mom
    assert err < 1e-4


def test_backward_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(3, 2, 4, 4))
    g = rng.normal(size=(3, 2, 4, 4))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    bn = layer_with(2, gamma, beta)
    xp = Parameter(x)
    bn(xp, S, True).backward(g)
    tx = torch.tensor(x, requires_grad=True)
    tg, tb = torch.tensor(gamma, requires_grad=True), torch.tensor(beta, requires_grad=True)
    torch.nn.functional.batch_norm(tx, None, None, tg, tb, training=True, eps=1e-5).backward(torch.tensor(g))
    np.testing.assert_allclose(xp.grad, tx.grad.numpy(), atol=1e-10)
    np.testing.assert_allclose(bn.gamma[S].grad, tg.grad.numpy(), atol=1e-10)
    np.testing.assert_allclose(bn.beta[S].grad, tb.grad.numpy(), atol=1e-10)


def test_state_round_trip(rng):
    bn = VsbnLayer(2, "t")
    bn(Tensor(rng.normal(size=(2, 2, 2, 2))), S, True)
    other = VsbnLayer(2, "t")
    other.load_state({k: v.copy() for k, v in bn.state().items()})
    for k, v in bn.state().items():
        np.testing.assert_array_equal(other.state()[k], v)


@pytest.mark.parametrize("domain", [S, T])
def test_isolation_check_helper(rng, domain):
    net = SegNet(NetworkConfig(depth=2, base_channels=2), seed=3)
    assert domain_param_isolation_check(net, domain, rng.random((2, 1, 8, 8)))


def test_isolation_across_seeds():
    for seed in range(20):
        r = np.random.default_rng(seed)
        net = SegNet(NetworkConfig(depth=2, base_channels=2), seed=seed)
        x, y = r.random((2, 1, 8, 8)), (r.random((2, 1, 8, 8)) > 0.7).astype(float)
        for d, other in ((S, T), (T, S)):
            assert domain_param_isolation_check(net, d, x, y)
            assert all(np.all(p.grad == 0.0) for bn in net.vsbn_layers for p in bn.parameters(other))
