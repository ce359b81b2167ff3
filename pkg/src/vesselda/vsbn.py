"""Vesselness-specific batch normalization.

Each layer owns one affine pair (gamma, beta) and one set of running
statistics per domain. The domain tag is passed explicitly on every call.
"""

from __future__ import annotations

import numpy as np

from .domain import DOMAINS, Domain
from .losses import hybrid_seg_loss
from .tensor import Parameter, Tensor, channel_dot, channel_sum, make_op, sum_all


class VsbnLayer:
    """Batch norm with a shared normalization step and per-domain parameters."""

    def __init__(self, channels: int, name: str, eps: float = 1e-5, stat_momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.name = name
        self.eps = eps
        self.stat_momentum = stat_momentum
        self.gamma = {d: Parameter(np.ones(channels), f"vsbn.{name}.{d.value}.gamma") for d in DOMAINS}
        self.beta = {d: Parameter(np.zeros(channels), f"vsbn.{name}.{d.value}.beta") for d in DOMAINS}
        self.running_mean = {d: np.zeros(channels) for d in DOMAINS}
        self.running_var = {d: np.ones(channels) for d in DOMAINS}
        self.num_batches = {d: 0 for d in DOMAINS}
        # Pre-affine (mean, std) of the most recent training batch, for bn-analysis.
        self.last_batch_stats: tuple[np.ndarray, np.ndarray] | None = None

    def parameters(self, domain) -> list[Parameter]:
        d = Domain.parse(domain)
        return [self.gamma[d], self.beta[d]]

    def __call__(self, x: Tensor, domain, train: bool) -> Tensor:
        if train:
            return self.forward_train(x, domain)
        return self.forward_eval(x, domain)

    def forward_train(self, x: Tensor, domain) -> Tensor:
        d = Domain.parse(domain)
        n, c, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ValueError(f"{self.name}: batch statistics need N*H*W >= 2, got {m}")
        if c != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {c}")
        # Shift by each channel's first value: a constant channel centers to exactly 0.
        shift = x.data[0, :, 0, 0].copy()
        centered = x.data - shift[None, :, None, None]
        mu_d = channel_sum(centered) / m
        centered -= mu_d[None, :, None, None]
        mu = shift + mu_d
        var = channel_dot(centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + self.eps)
        gamma, beta = self.gamma[d], self.beta[d]
        k = gamma.data * inv_std
        out = centered * k[None, :, None, None]
        out += beta.data[None, :, None, None]

        mom = self.stat_momentum
        self.running_mean[d][...] = (1 - mom) * self.running_mean[d] + mom * mu
        self.running_var[d][...] = (1 - mom) * self.running_var[d] + mom * var * (m / (m - 1))
        self.num_batches[d] += 1
        self.last_batch_stats = (mu, np.sqrt(var))

        def backward(g):
            # With gxhat = gamma * g, both of its channel sums reduce to gbeta and ggamma.
            xhat = centered * inv_std[None, :, None, None]
            gbeta = channel_sum(g)
            ggamma = channel_dot(g, xhat)
            gx = xhat
            gx *= -(ggamma / m)[None, :, None, None]
            gx += g
            gx -= (gbeta / m)[None, :, None, None]
            gx *= (gamma.data * inv_std)[None, :, None, None]
            return gx, ggamma, gbeta

        return make_op(out, (x, gamma, beta), backward)

    def forward_eval(self, x: Tensor, domain) -> Tensor:
        d = Domain.parse(domain)
        if self.num_batches[d] == 0:
            raise RuntimeError(f"{self.name}: no statistics for domain {d.value}")
        inv_std = 1.0 / np.sqrt(self.running_var[d] + self.eps)
        gamma, beta = self.gamma[d], self.beta[d]
        a = (gamma.data * inv_std)[None, :, None, None]
        b = (beta.data - gamma.data * inv_std * self.running_mean[d])[None, :, None, None]
        out = a * x.data + b
        xhat = (x.data - self.running_mean[d][None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return g * a, channel_dot(g, xhat), channel_sum(g)

        return make_op(out, (x, gamma, beta), backward)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for d in DOMAINS:
            key = f"vsbn.{self.name}.{d.value}"
            out[f"{key}.gamma"] = self.gamma[d].data
            out[f"{key}.beta"] = self.beta[d].data
            out[f"{key}.running_mean"] = self.running_mean[d]
            out[f"{key}.running_var"] = self.running_var[d]
            out[f"{key}.num_batches"] = np.array(float(self.num_batches[d]))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for d in DOMAINS:
            key = f"vsbn.{self.name}.{d.value}"
            self.gamma[d].data[...] = state[f"{key}.gamma"]
            self.beta[d].data[...] = state[f"{key}.beta"]
            self.running_mean[d][...] = state[f"{key}.running_mean"]
            self.running_var[d][...] = state[f"{key}.running_var"]
            self.num_batches[d] = int(state[f"{key}.num_batches"])


def domain_param_isolation_check(network, domain, x, y=None) -> bool:
    """Backprop one TRAIN-mode loss under ``domain`` and confirm routing.

    The other domain's gamma/beta gradients must be exactly zero while at least
    one shared convolution gradient is nonzero. Gradients are zeroed first.
    """
    d = Domain.parse(domain)
    other = Domain.TARGET if d is Domain.SOURCE else Domain.SOURCE
    for p in network.all_parameters():
        p.zero_grad()
    pred = network.predict(x, d, train=True)
    loss = sum_all(pred) if y is None else hybrid_seg_loss(pred, y)
    loss.backward()
    other_clean = all(not np.any(p.grad) for layer in network.vsbn_layers for p in layer.parameters(other))
    theta_moved = any(np.any(p.grad) for p in network.theta)
    return other_clean and theta_moved
