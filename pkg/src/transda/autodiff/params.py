from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, ShapeError, default_dtype

NETWORK_KINDS = ("extractor", "classifier", "discriminator", "similarity")


class ParameterStore:
    """Ordered name -> Tensor mapping for one network.

    Insertion order is the iteration order, and it is what checkpoints and
    EMA updates walk.
    """

    def __init__(self, kind: str, entries: Optional[dict[str, Tensor]] = None):
        if kind not in NETWORK_KINDS:
            raise ValueError(f"unknown network kind {kind!r}; expected one of {NETWORK_KINDS}")
        self.kind = kind
        self._entries: dict[str, Tensor] = {}
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def num_params(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def copy(self, requires_grad: Optional[bool] = None) -> "ParameterStore":
        """Deep copy; values are fresh arrays."""
        out = ParameterStore(self.kind)
        for name, t in self._entries.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(name, Tensor(t.data.copy(), requires_grad=rg, dtype=t.data.dtype))
        return out

    def detached(self) -> "ParameterStore":
        """View sharing the same arrays but with no gradient path."""
        out = ParameterStore(self.kind)
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data, requires_grad=False, dtype=t.data.dtype))
        return out

    def assign_from(self, other: "ParameterStore") -> None:
        """Copy values from ``other`` in place (names and shapes must match)."""
        check_aligned(self, other)
        for name, t in self._entries.items():
            t.data[...] = other[name].data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.kind)
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, dtype=dtype))
        return out

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[n].data) for n, t in self._entries.items())

    def __repr__(self) -> str:
        return f"ParameterStore(kind={self.kind!r}, tensors={len(self)}, params={self.num_params()})"


def check_aligned(a: ParameterStore, b: ParameterStore) -> None:
    if a.names() != b.names():
        missing = set(a.names()) ^ set(b.names())
        raise KeyError(f"parameter stores differ in names: {sorted(missing)[:5]}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeError(f"align[{name}]", a[name].shape, b[name].shape)


def new_param(shape, rng: np.random.Generator, std: float = 0.0) -> np.ndarray:
    if std == 0.0:
        return np.zeros(shape, dtype=default_dtype())
    return (rng.standard_normal(shape) * std).astype(default_dtype())
