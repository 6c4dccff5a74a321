"""Adam / AdamW and the two learning-rate schedules used in training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class Schedule:
    """``kind`` is one of constant, linear (warm-up then linear decay), poly."""

    kind: str = "constant"
    base_lr: float = 1e-3
    total_steps: int = 1
    warmup_steps: int = 0
    power: float = 0.9

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "poly"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    base = schedule.base_lr
    if schedule.kind == "constant":
        return base
    total = schedule.total_steps
    if step > total:
        return 0.0
    if schedule.kind == "poly":
        return base * (1.0 - step / total) ** schedule.power
    warm = schedule.warmup_steps
    if warm > 0 and step < warm:
        return base * step / warm
    if total <= warm:
        return base
    return base * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    schedule: Schedule
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore, schedule: Schedule, weight_decay: float = 0.0):
        st = cls(schedule=schedule, weight_decay=weight_decay)
        for name, t in store.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st

    def current_lr(self) -> float:
        return lr_at(self.schedule, self.step)


def _update(store: ParameterStore, state: OptimizerState, decoupled: bool) -> float:
    lr = state.current_lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in store.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} of {store.kind} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        if decoupled and state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * state.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + EPS)
        p.data -= (lr * upd).astype(p.data.dtype)
    return lr


def adam_step(store: ParameterStore, state: OptimizerState) -> float:
    """Plain Adam; returns the learning rate used."""
    return _update(store, state, decoupled=False)


def adamw_step(store: ParameterStore, state: OptimizerState) -> float:
    """Adam with decoupled weight decay; returns the learning rate used."""
    return _update(store, state, decoupled=True)
