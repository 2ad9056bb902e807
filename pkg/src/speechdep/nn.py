"""Parameters, module containers and deterministic initialisation."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A named, optionally trainable tensor owned by a :class:`Module`.

    ``trainable`` is the same flag as ``requires_grad``: a frozen parameter is
    never recorded in the graph, so it receives no gradient and the optimizer
    skips it.
    """

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, copy=True), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """Registers Parameter and Module attributes in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, m in self._modules.items():
            yield from m.named_parameters(prefix + key + ".")

    def parameters(self) -> "OrderedDict[str, Parameter]":
        """Name → parameter mapping; also refreshes each parameter's ``name``."""
        out = OrderedDict()
        for name, p in self.named_parameters():
            p.name = name
            out[name] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, (d_in, d_out), d_in, d_out, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias
