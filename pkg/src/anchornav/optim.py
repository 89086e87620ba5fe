"""AdamW with parameter freezing, plus the two learning-rate schedules.

Parameters live in a flat ``name -> Tensor`` mapping.  A partition splits the
names into a frozen set (never touched by the optimizer) and an adaptable set
(moment buffers exist only for these).  Iteration is always in sorted-name
order so updates are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class OptimError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint frozen/adaptable split covering every model parameter."""

    frozen: frozenset
    adaptable: frozenset

    def __post_init__(self):
        overlap = self.frozen & self.adaptable
        if overlap:
            raise ValueError(f"partition overlap: {sorted(overlap)[:3]}")

    @classmethod
    def split(cls, all_names, adaptable) -> "ParameterPartition":
        adaptable = frozenset(adaptable)
        all_names = frozenset(all_names)
        missing = adaptable - all_names
        if missing:
            raise ValueError(f"unknown adaptable parameters: {sorted(missing)[:3]}")
        return cls(frozen=all_names - adaptable, adaptable=adaptable)

    def validate_covers(self, all_names):
        all_names = frozenset(all_names)
        if self.frozen | self.adaptable != all_names:
            diff = all_names ^ (self.frozen | self.adaptable)
            raise ValueError(f"partition does not cover parameters: {sorted(diff)[:3]}")


def global_grad_norm(params: dict, names) -> float:
    total = 0.0
    for name in sorted(names):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict, names, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm."""
    norm = global_grad_norm(params, names)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in sorted(names):
            g = params[name].grad
            if g is not None:
                g *= scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam over the adaptable half of a partition."""

    def __init__(
        self,
        params: dict,
        partition: ParameterPartition,
        lr: float,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        partition.validate_covers(params.keys())
        self.params = params
        self.partition = partition
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in sorted(partition.adaptable)}
        self.v = {n: np.zeros_like(params[n].data) for n in sorted(partition.adaptable)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(self.partition.adaptable):
            p: Tensor = self.params[name]
            if p.grad is None:
                raise OptimError(f"missing gradient on adaptable parameter '{name}'")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)
            p.grad = None

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state(self, state: dict):
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for n in self.m:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]


class CosineSchedule:
    """Cosine annealing with warm restarts every ``period`` epochs."""

    def __init__(self, base_lr: float, period: int = 20, min_lr: float = 0.0):
        if period < 1:
            raise ValueError("period must be >= 1")
        self.base_lr = base_lr
        self.period = period
        self.min_lr = min_lr

    def lr_at(self, epoch: int) -> float:
        phase = (epoch % self.period) / self.period
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + np.cos(np.pi * phase))


class AdaptiveKlSchedule:
    """Halve/double the learning rate when approximate KL leaves its band.

    The rate is halved when KL exceeds twice the threshold and doubled when
    it falls below half of it, clamped to [min_lr, max_lr].
    """

    def __init__(
        self,
        base_lr: float,
        kl_threshold: float = 0.01,
        min_lr: float = 1e-7,
        max_lr: float = 1e-2,
    ):
        self.lr = base_lr
        self.kl_threshold = kl_threshold
        self.min_lr = min_lr
        self.max_lr = max_lr

    def update(self, approx_kl: float) -> float:
        if approx_kl > 2.0 * self.kl_threshold:
            self.lr = max(self.lr / 2.0, self.min_lr)
        elif approx_kl < 0.5 * self.kl_threshold:
            self.lr = min(self.lr * 2.0, self.max_lr)
        return self.lr
