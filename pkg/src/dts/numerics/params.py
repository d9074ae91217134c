"""Named parameter storage and the LSTM cell built from recorded ops."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DTYPE, ShapeMismatch, Tensor


class ParameterStore:
    """Ordered name -> leaf tensor map. Gradients live on the tensors themselves."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def create(self, name: str, shape, rng: np.random.Generator, scale: float = 0.1,
               zeros: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        if zeros:
            data = np.zeros(shape, dtype=DTYPE)
        else:
            data = rng.uniform(-scale, scale, size=shape)
        p = Tensor(data, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add(self, name: str, param: Tensor) -> Tensor:
        if name in self._params and self._params[name] is not param:
            raise KeyError(f"parameter {name!r} already exists")
        self._params[name] = param
        return param

    def update(self, other: "ParameterStore", prefix: str = "") -> None:
        for name, p in other.items():
            self.add(prefix + name, p)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for n, p in self._params.items()
        }

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if n not in self._params:
                continue
            p = self._params[n]
            if p.shape != tuple(arr.shape):
                raise ShapeMismatch(f"{n}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=DTYPE)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))


class LSTMParams:
    """Weights of one LSTM layer; gate blocks ordered input, forget, cell, output."""

    def __init__(self, store: ParameterStore, prefix: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator, scale: float = 0.1):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight = store.create(f"{prefix}.weight", (input_size + hidden_size, 4 * hidden_size),
                                   rng, scale)
        self.bias = store.create(f"{prefix}.bias", (4 * hidden_size,), rng, scale)


def lstm_cell(x, h_prev, c_prev, params: LSTMParams) -> tuple[Tensor, Tensor]:
    """One step of a standard four-gate LSTM. Works on vectors or row batches."""
    x, h_prev, c_prev = T.as_tensor(x), T.as_tensor(h_prev), T.as_tensor(c_prev)
    H = params.hidden_size
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeMismatch(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for input {params.input_size}, hidden {H}"
        )
    z = T.add(T.matmul(T.concat([x, h_prev], axis=-1), params.weight), params.bias)
    i = T.sigmoid(z[..., 0:H])
    f = T.sigmoid(z[..., H:2 * H])
    g = T.tanh(z[..., 2 * H:3 * H])
    o = T.sigmoid(z[..., 3 * H:4 * H])
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c
