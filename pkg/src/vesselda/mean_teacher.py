"""EMA teacher of the TARGET parameter view and the perturbed consistency term."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import Domain
from .losses import consistency_mse
from .segnet import SegNet
from .tensor import Tensor, hflip, no_grad


@dataclass
class PerturbConfig:
    noise_sigma: float = 0.05
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")


def target_view(network: SegNet) -> dict[str, np.ndarray]:
    """theta, gamma_T, beta_T and TARGET running statistics, by checkpoint key."""
    state = network.state()
    return {k: state[k] for k in network.domain_state_keys(Domain.TARGET)}


@dataclass
class TeacherState:
    """Shadow copy of the student's TARGET view, updated by EMA.

    ``shadow`` values alias the arrays of a private network copy, so EMA
    updates are immediately visible to ``predict``.
    """

    shadow: dict[str, np.ndarray]
    decay: float = 0.99
    step_count: int = 0
    network: SegNet | None = field(default=None, repr=False)

    @classmethod
    def from_student(cls, student: SegNet, decay: float = 0.99) -> "TeacherState":
        net = student.copy()
        for bn in net.vsbn_layers:
            # teacher statistics are defined from construction on (initial values)
            bn.num_batches[Domain.TARGET] = max(1, bn.num_batches[Domain.TARGET])
        return cls(shadow=target_view(net), decay=decay, network=net)

    def predict(self, x) -> np.ndarray:
        if self.network is None:
            raise RuntimeError("teacher is not initialized")
        with no_grad():
            return self.network.predict(x, Domain.TARGET, train=False).data

    def state(self, prefix: str = "teacher.") -> dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self.shadow.items()}


def ema_update(teacher: TeacherState, student_params: dict[str, np.ndarray]) -> TeacherState:
    """shadow <- decay * shadow + (1 - decay) * student, for every key."""
    if set(student_params) != set(teacher.shadow):
        missing = sorted(set(teacher.shadow) - set(student_params))
        extra = sorted(set(student_params) - set(teacher.shadow))
        raise ValueError(f"ema_update: key mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    a = teacher.decay
    for k, v in teacher.shadow.items():
        v *= a
        v += (1.0 - a) * student_params[k]
    teacher.step_count += 1
    return teacher


def perturb(x: np.ndarray, config: PerturbConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random per-sample horizontal flip then clamped Gaussian noise.

    ``x`` is an NCHW batch in [0, 1]. Returns the perturbed batch and the
    per-sample flip flags.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    flips = rng.random(x.shape[0]) < config.flip_prob
    out = x.copy()
    out[flips] = x[flips][..., ::-1]
    if config.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, config.noise_sigma, size=out.shape), 0.0, 1.0)
    return out, flips


def consistency_step(x_u: np.ndarray, student: SegNet, teacher: TeacherState | None,
                     config: PerturbConfig, seeds: tuple[int, int], student_train: bool = True) -> Tensor:
    """MSE between student and teacher predictions under independent perturbations."""
    if teacher is None or teacher.network is None:
        raise RuntimeError("consistency_step needs an initialized teacher")
    xs, fs = perturb(x_u, config, seeds[0])
    xt, ft = perturb(x_u, config, seeds[1])
    p_student = hflip(student.predict(xs, Domain.TARGET, train=student_train), fs)
    p_teacher = teacher.predict(xt)
    p_teacher[ft] = p_teacher[ft][..., ::-1]
    return consistency_mse(p_student, p_teacher)
