"""Named parameter registry shared by the model components."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .diffmath import Parameter


class ParamStore:
    def __init__(self, rng: np.random.Generator | None = None):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def glorot(self, name: str, shape: tuple[int, int]) -> Parameter:
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def normal(self, name: str, shape, scale: float) -> Parameter:
        return self.add(name, scale * self.rng.standard_normal(shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.data.copy()) for k, p in self._params.items())

    def load_state(self, state):
        for k, v in state.items():
            p = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
            p.data[...] = v

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())
