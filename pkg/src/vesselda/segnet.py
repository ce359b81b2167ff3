"""Mini U-Net whose convolutions are shared and whose batch norms are VSBN.

The SOURCE view of the network is ``theta + (gamma_S, beta_S)`` and the TARGET
view is ``theta + (gamma_T, beta_T)``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import DOMAINS, Domain
from .tensor import (
    Parameter,
    Tensor,
    channel_concat,
    conv2d,
    load_tensor,
    maxpool2,
    relu,
    save_tensor,
    sigmoid,
    upsample2,
)
from .vsbn import VsbnLayer

CKPT_HEADER = b"CKPT v1\n"


@dataclass
class NetworkConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")


class _Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)), f"theta.{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"theta.{name}.bias")
        self.pad = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.pad)


class SegNet:
    """U-Net: encoder levels of [conv-VSBN-relu] x2 + pool, mirrored decoder."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        self.config = config or NetworkConfig()
        self.config.validate()
        rng = np.random.default_rng(seed)
        c = self.config
        self.blocks: dict[str, list[tuple[_Conv, VsbnLayer]]] = {}
        self.theta: list[Parameter] = []
        self.vsbn_layers: list[VsbnLayer] = []

        def block(name: str, cin: int, cout: int):
            units = []
            for j, ci in enumerate((cin, cout)):
                conv = _Conv(f"{name}.conv{j}", ci, cout, 3, rng)
                bn = VsbnLayer(cout, f"{name}.bn{j}")
                self.theta += [conv.weight, conv.bias]
                self.vsbn_layers.append(bn)
                units.append((conv, bn))
            self.blocks[name] = units

        chans = [c.base_channels * 2 ** lvl for lvl in range(c.depth)]
        cin = c.in_channels
        for lvl, ch in enumerate(chans):
            block(f"enc{lvl}", cin, ch)
            cin = ch
        mid = c.base_channels * 2 ** c.depth
        block("mid", cin, mid)
        prev = mid
        for lvl in reversed(range(c.depth)):
            block(f"dec{lvl}", prev + chans[lvl], chans[lvl])
            prev = chans[lvl]
        self.head = _Conv("head", prev, c.out_channels, 1, rng)
        self.theta += [self.head.weight, self.head.bias]

    # designated layers for BN-statistic analysis: shallow / intermediate / deep
    @property
    def analysis_layers(self) -> dict[str, VsbnLayer]:
        return {
            "shallow": self.blocks["enc0"][0][1],
            "intermediate": self.blocks["mid"][-1][1],
            "deep": self.blocks["dec0"][-1][1],
        }

    def _block(self, name: str, x: Tensor, domain: Domain, train: bool) -> Tensor:
        for conv, bn in self.blocks[name]:
            x = relu(bn(conv(x), domain, train))
        return x

    def predict(self, x, domain, train: bool = False) -> Tensor:
        """Vessel probability map psi(x; Theta^domain)."""
        d = Domain.parse(domain)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4:
            raise ValueError(f"predict expects NCHW input, got shape {x.shape}")
        h, w = x.shape[2], x.shape[3]
        div = 2 ** self.config.depth
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by 2^depth = {div}")
        skips = []
        for lvl in range(self.config.depth):
            x = self._block(f"enc{lvl}", x, d, train)
            skips.append(x)
            x = maxpool2(x)
        x = self._block("mid", x, d, train)
        for lvl in reversed(range(self.config.depth)):
            x = channel_concat(upsample2(x), skips[lvl])
            x = self._block(f"dec{lvl}", x, d, train)
        return sigmoid(self.head(x))

    def parameters(self, domain) -> list[Parameter]:
        d = Domain.parse(domain)
        return list(self.theta) + [p for bn in self.vsbn_layers for p in bn.parameters(d)]

    def all_parameters(self) -> list[Parameter]:
        return list(self.theta) + [p for bn in self.vsbn_layers for d in DOMAINS for p in bn.parameters(d)]

    def num_parameters(self, domain=None) -> int:
        params = self.all_parameters() if domain is None else self.parameters(domain)
        return sum(p.data.size for p in params)

    def zero_grad(self) -> None:
        for p in self.all_parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Named views of every parameter and running statistic (no copies)."""
        out = {p.name: p.data for p in self.theta}
        for bn in self.vsbn_layers:
            out.update(bn.state())
        return out

    def domain_state_keys(self, domain) -> list[str]:
        """Keys of the Theta^domain view plus that domain's running statistics."""
        d = Domain.parse(domain)
        keys = [p.name for p in self.theta]
        for bn in self.vsbn_layers:
            base = f"vsbn.{bn.name}.{d.value}"
            keys += [f"{base}.gamma", f"{base}.beta", f"{base}.running_mean", f"{base}.running_var"]
        return keys

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.theta:
            p.data[...] = state[p.name]
        for bn in self.vsbn_layers:
            bn.load_state(state)

    def copy(self) -> "SegNet":
        return copy.deepcopy(self)


def build(config: NetworkConfig | None = None, seed: int = 0) -> SegNet:
    return SegNet(config, seed)


def save_checkpoint(path, network: SegNet, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``CKPT v1`` then (name line, TNSR block) pairs."""
    entries = {f"config.{k}": np.array(float(v)) for k, v in asdict(network.config).items()}
    entries.update(network.state())
    if extra:
        entries.update(extra)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        for name, arr in entries.items():
            fh.write(name.encode("ascii") + b"\n")
            save_tensor(fh, arr)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_HEADER:
            raise ValueError(f"{path}: not a CKPT v1 file")
        while True:
            name = fh.readline()
            if not name:
                break
            key = name.decode("ascii", errors="replace").strip()
            try:
                entries[key] = load_tensor(fh)
            except ValueError as exc:
                raise ValueError(f"{path}: corrupt checkpoint entry {key!r}: {exc}") from None
    return entries


def load_checkpoint(path) -> tuple[SegNet, dict[str, np.ndarray]]:
    """Rebuild a network from a checkpoint; returns it plus non-network entries."""
    entries = read_checkpoint(path)
    try:
        cfg = NetworkConfig(**{k: int(entries[f"config.{k}"]) for k in asdict(NetworkConfig())})
    except KeyError as exc:
        raise ValueError(f"{path}: missing checkpoint entry {exc.args[0]!r}") from None
    net = SegNet(cfg, seed=0)
    wanted = net.state()
    for key, arr in wanted.items():
        if key not in entries:
            raise ValueError(f"{path}: missing checkpoint entry {key!r}")
        if entries[key].shape != arr.shape:
            raise ValueError(f"{path}: entry {key!r} has shape {entries[key].shape}, expected {arr.shape}")
    net.load_state(entries)
    extra = {k: v for k, v in entries.items() if k not in wanted and not k.startswith("config.")}
    return net, extra
