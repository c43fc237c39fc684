"""Parameterised layers built on the autodiff ops."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor carrying its Adam moments."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32, bias_init: float = 0.0):
        self.weight = Parameter(glorot(rng, (n_in, n_out), n_in, n_out, dtype))
        self.bias = Parameter(np.full(n_out, bias_init, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)


class Conv1d(Module):
    def __init__(self, n_in: int, n_out: int, kernel_size: int, rng, dtype=np.float32):
        self.kernel_size = kernel_size
        self.weight = Parameter(glorot(rng, (kernel_size, n_in, n_out),
                                       kernel_size * n_in, kernel_size * n_out, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias)


class ConvBank(Module):
    """Filters with kernel sizes 1..n, ReLU, outputs stacked along channels."""

    def __init__(self, n_in: int, channels: int, n_filters: int, rng, dtype=np.float32):
        self.n_filters = n_filters
        self.convs = [Conv1d(n_in, channels, k, rng, dtype) for k in range(1, n_filters + 1)]

    @property
    def receptive_field(self) -> int:
        return self.n_filters

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        out = ag.concat([ag.relu(c(x)) for c in self.convs], axis=-1)
        return out if mask is None else ag.mul(out, mask)


class GRU(Module):
    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        self.hidden = hidden
        self.w_x = Parameter(glorot(rng, (n_in, 3 * hidden), n_in, hidden, dtype))
        self.w_h = Parameter(glorot(rng, (hidden, 3 * hidden), hidden, hidden, dtype))
        self.b_x = Parameter(np.zeros(3 * hidden, dtype=dtype))
        self.b_h = Parameter(np.zeros(3 * hidden, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.gru(x, self.w_x, self.w_h, self.b_x, self.b_h)


class BiGRU(Module):
    """Forward and backward GRUs, concatenated and projected back to ``n_out``."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, dtype=np.float32):
        self.forward_rnn = GRU(n_in, hidden, rng, dtype)
        self.backward_rnn = GRU(n_in, hidden, rng, dtype)
        self.proj = Dense(2 * hidden, n_out, rng, dtype)

    def directions(self, x: Tensor, lengths=None) -> tuple[Tensor, Tensor]:
        if x.shape[1] == 0:
            raise ValueError("BiGRU: empty sequence")
        if lengths is None:
            lengths = np.full(x.shape[0], x.shape[1])
        fwd = self.forward_rnn(x)
        rev = ag.reverse_within_lengths(x, lengths)
        bwd = ag.reverse_within_lengths(self.backward_rnn(rev), lengths)
        return fwd, bwd

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        fwd, bwd = self.directions(x, lengths)
        return self.proj(ag.concat([fwd, bwd], axis=-1))
