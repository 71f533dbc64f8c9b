"""Parameter containers, Adam, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError
from .tensor import Tensor


class ParameterSet:
    """Ordered map from parameter path to Tensor.

    Iteration is always lexicographic by path, so reductions over a
    ParameterSet are order-deterministic regardless of insertion order.
    Entries with ``requires_grad=False`` (batch-norm running stats) ride
    along for checkpointing but are ignored by the optimizer.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = dict(params or {})

    def __setitem__(self, path: str, tensor: Tensor) -> None:
        self._params[path] = tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for path in sorted(self._params):
            yield path, self._params[path]

    def trainable_items(self):
        for path, t in self.items():
            if t.requires_grad:
                yield path, t

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for path, t in self.items():
            c = Tensor(t.values.copy(), requires_grad=t.requires_grad)
            out[path] = c
        return out

    def update(self, other: "ParameterSet") -> None:
        for path, t in other.items():
            self._params[path] = t


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **kw) -> "AdamState":
        state = cls(**kw)
        for path, tensor in params.trainable_items():
            state.m[path] = np.zeros_like(tensor.values)
            state.v[path] = np.zeros_like(tensor.values)
        return state


def adam_step(params: ParameterSet, state: AdamState, lr: float,
              partial: bool = False) -> None:
    """One Adam update over every trainable parameter, in path order.

    A missing gradient is a protocol error unless ``partial`` is set, in
    which case ungradiented parameters are left untouched (used by the
    shared server under skip-entry, where a batch entering at a deep cut
    never reaches the shallower server layers).
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for path, tensor in params.trainable_items():
        if tensor.grad is None:
            if partial:
                continue
            raise ProtocolError(f"adam_step: parameter {path!r} has no gradient")
        g = tensor.grad
        m = state.m[path]
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from lr_max down to lr_min over t_max epochs."""

    lr_max: float
    lr_min: float
    t_max: int
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ConfigError("CosineSchedule: lr_min must not exceed lr_max")
        if self.t_max < 1:
            raise ConfigError("CosineSchedule: t_max must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("CosineSchedule: warmup_epochs must be non-negative")


def cosine_lr(sched: CosineSchedule, epoch: int) -> float:
    """Learning rate at an integer epoch; epochs past t_max clamp to lr_min."""
    if epoch >= sched.t_max:
        return sched.lr_min
    if sched.warmup_epochs > 0 and epoch < sched.warmup_epochs:
        return sched.lr_max * (epoch + 1) / sched.warmup_epochs
    span = sched.t_max - sched.warmup_epochs
    pos = epoch - sched.warmup_epochs
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (
        1.0 + math.cos(math.pi * pos / span)
    )
