"""Minimal layer containers on top of the tape autograd."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Parameter, ParamStore, Tensor


class Module:
    """Parameters and sub-modules are discovered from instance attributes (and lists of them)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
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
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def param_store(self, prefix: str = "") -> ParamStore:
        return ParamStore(self.named_parameters(prefix))

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, padding="reflect"):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.bias = Parameter(np.zeros(cout))
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        std = np.sqrt(1.0 / din)
        self.weight = Parameter(rng.normal(0.0, std, size=(din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y if self.bias is None else F.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DenseBlock(Module):
    """Four 3x3 convs, each fed the concatenation of the block input and all earlier outputs,
    followed by a 1x1 compression to ``cout`` channels."""

    def __init__(self, cin: int, cout: int, growth: int, rng: np.random.Generator, n_layers: int = 4):
        self.layers = [Conv2d(cin + i * growth, growth, 3, rng) for i in range(n_layers)]
        self.compress = Conv2d(cin + n_layers * growth, cout, 1, rng, padding="valid")

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else F.concat(feats, axis=-3)
            feats.append(F.relu(layer(inp)))
        return F.relu(self.compress(F.concat(feats, axis=-3)))
