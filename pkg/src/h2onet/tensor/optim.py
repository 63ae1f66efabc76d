"""Adam with bias correction and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import Tensor

DEFAULT_BETAS = (0.4, 0.99)


@dataclass
class OptimizerState:
    lr: float
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState, lr: float | None = None) -> None:
    """Apply one Adam update in place.

    Parameters whose gradient is ``None`` are treated as having a zero
    gradient. The step counter advances by exactly one per call.
    """
    lr = state.lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment buffer shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas: tuple[float, float] = DEFAULT_BETAS, eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.state.step = int(state["step"][0])
        n = len(self.params)
        self.state.m = [np.array(state[f"m.{i}"]) for i in range(n)] if "m.0" in state else []
        self.state.v = [np.array(state[f"v.{i}"]) for i in range(n)] if "v.0" in state else []


@dataclass
class ScheduleState:
    base_lr: float
    min_lr: float = 0.0
    period: int = 1
    step: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("schedule period must be at least 1 step")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")


def cosine_lr(state: ScheduleState) -> float:
    """lr(t) = min + (base - min) * (1 + cos(pi * t / T)) / 2, with t held at T past the end."""
    t = min(max(state.step, 0), state.period)
    lr = state.min_lr + 0.5 * (state.base_lr - state.min_lr) * (1.0 + math.cos(math.pi * t / state.period))
    return min(max(lr, state.min_lr), state.base_lr)


class CosineSchedule:
    def __init__(self, base_lr: float, period: int, min_lr: float = 0.0):
        self.state = ScheduleState(base_lr=base_lr, min_lr=min_lr, period=max(int(period), 1))

    @property
    def lr(self) -> float:
        return cosine_lr(self.state)

    def advance(self) -> None:
        self.state.step += 1
