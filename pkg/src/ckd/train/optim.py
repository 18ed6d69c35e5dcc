"""Adam and the multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import ModelParameters, ShapeError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params: ModelParameters, **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()}, **kw)

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()},
                         self.t, self.beta1, self.beta2, self.eps, self.lr)


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> tuple[ModelParameters, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lr`` overrides ``state.lr`` for this step (the schedule drives it).
    """
    if set(grads) != set(params.tensors):
        missing = set(params.tensors) ^ set(grads)
        raise ShapeError(f"gradient/parameter name mismatch: {sorted(missing)[:5]}")
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape or state.m[k].shape != g.shape:
            raise ShapeError(f"{k}: gradient {g.shape} vs parameter {params.tensors[k].shape}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    milestones: tuple[int, ...] = (7, 10, 18)
    gamma: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    """``initial_lr * gamma ** (number of milestones <= epoch)``; epochs count from 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial_lr * schedule.gamma**passed
