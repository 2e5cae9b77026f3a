"""Named parameter storage and initializers."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamStore(Mapping):
    """Ordered ``name -> Tensor`` mapping of trainable parameters.

    Names are dotted paths (``enc.stage0.pair0.b0.attn.wq``); ``view(prefix)``
    gives a scoped accessor so model code can address its own sub-tree.
    """

    def __init__(self, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self.dtype = np.dtype(dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def set(self, name: str, value) -> None:
        """Overwrite the value of an existing parameter (shape must match)."""
        cur = self._params[name]
        arr = np.array(value, dtype=self.dtype)
        if arr.shape != cur.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {cur.shape}")
        cur.data = arr

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def drop(self, prefix: str) -> None:
        for k in [k for k in self._params if k.startswith(prefix)]:
            del self._params[k]

    def update_from(self, other: "ParamStore", prefix: str = "") -> None:
        for k, v in other.items():
            if k.startswith(prefix):
                if k in self._params:
                    self.set(k, v.data)
                else:
                    self.add(k, v.data)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every tensor cast to ``dtype`` (e.g. the 64-bit shadow path)."""
        out = ParamStore(dtype)
        for k, v in self._params.items():
            out.add(k, v.data)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())


class ParamView:
    """Prefix-scoped read access into a :class:`ParamStore`."""

    __slots__ = ("store", "prefix")

    def __init__(self, store, prefix: str):
        self.store = store
        self.prefix = prefix.rstrip(".") + "." if prefix else ""

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return (self.prefix + name) in self.store

    def get(self, name: str, default=None):
        return self.store.get(self.prefix + name, default)

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self.store, self.prefix + prefix)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated at ``bound`` standard deviations (by resampling)."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
