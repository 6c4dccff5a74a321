"""EMA teacher parameters and the routing of teacher branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .autodiff import ParameterStore, check_aligned

MOMENTUM_GRID = (0.0, 0.9, 0.99, 0.999, 0.9999)


@dataclass
class SmoothingConfig:
    mo_pl: bool = False
    mo_fa: bool = False
    m: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError(f"momentum m must lie in [0, 1), got {self.m}")

    @property
    def active(self) -> bool:
        return self.mo_pl or self.mo_fa

    def smoothed_kinds(self) -> tuple[str, ...]:
        """Stores that get an EMA copy: F always when active, C only for pseudo labels."""
        if self.mo_pl:
            return ("extractor", "classifier")
        if self.mo_fa:
            return ("extractor",)
        return ()


class MomentumPair:
    """A live store and its exponential moving average."""

    def __init__(self, source: ParameterStore, target: ParameterStore, m: float):
        check_aligned(source, target)
        self.source = source
        self.target = target
        self.m = float(m)

    def __repr__(self) -> str:
        return f"MomentumPair(kind={self.source.kind!r}, m={self.m})"


def init_momentum(source: ParameterStore, m: float = 0.999) -> MomentumPair:
    return MomentumPair(source, source.copy(requires_grad=False), m)


def ema_update(pair: MomentumPair) -> None:
    """target <- m * target + (1 - m) * source, in place."""
    check_aligned(pair.source, pair.target)
    m = pair.m
    for name, t in pair.target.items():
        s = pair.source[name].data
        if m == 0.0:
            t.data[...] = s
        else:
            t.data *= t.data.dtype.type(m)
            t.data += t.data.dtype.type(1.0 - m) * s
        t.grad = None


def init_pairs(cfg: SmoothingConfig, live: dict[str, ParameterStore]) -> dict[str, MomentumPair]:
    return {kind: init_momentum(live[kind], cfg.m) for kind in cfg.smoothed_kinds()}


def teacher_branches(cfg: SmoothingConfig, live: dict[str, ParameterStore],
                     pairs: Optional[dict[str, MomentumPair]]):
    """Pick the parameters feeding pseudo labels and target-side alignment features.

    Returns ``((pl_extractor, pl_classifier), fa_extractor)``. Pseudo-label
    parameters never carry gradient; the alignment extractor is the live,
    trainable store unless momentum features are requested.
    """
    pairs = pairs or {}
    if cfg.active:
        needed = cfg.smoothed_kinds()
        missing = [k for k in needed if k not in pairs]
        if missing:
            raise ValueError(f"smoothing enabled but no momentum pair for {missing}")
    if cfg.mo_pl:
        pl = (pairs["extractor"].target, pairs["classifier"].target)
    else:
        pl = (live["extractor"].detached(), live["classifier"].detached())
    fa = pairs["extractor"].target if cfg.mo_fa else live["extractor"]
    return pl, fa
