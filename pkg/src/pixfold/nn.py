"""Parameter containers and equalized-learning-rate layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .ops import conv2d, fused_leaky_relu, linear
from .tensor import Tensor, get_default_dtype

__all__ = ["Parameter", "Module", "EqualLinear", "EqualConv2d", "MappingNetwork"]


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data, dtype=None, name=None):
        super().__init__(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Minimal parameter tree walked in attribute-definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class EqualLinear(Module):
    """Linear layer with runtime fan-in weight scaling (equalized learning rate)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 bias_init: float = 0.0, lr_mul: float = 1.0, activate: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(rng.standard_normal((in_dim, out_dim)) / lr_mul)
        self.bias = Parameter(np.full(out_dim, bias_init / lr_mul)) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activate = activate

    def forward(self, x):
        out = linear(x, self.weight * self.scale)
        b = self.bias * self.lr_mul if self.bias is not None else None
        if self.activate:
            return fused_leaky_relu(out, b)
        return out + b if b is not None else out

    @property
    def num_macs_per_position(self) -> int:
        return self.in_dim * self.out_dim


class EqualConv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True,
                 activate: bool = False):
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = Parameter(rng.standard_normal((k, k, cin, cout)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.scale = 1.0 / math.sqrt(k * k * cin)
        self.activate = activate

    def forward(self, x):
        out = conv2d(x, self.weight * self.scale)
        if self.activate:
            return fused_leaky_relu(out, self.bias)
        return out + self.bias if self.bias is not None else out


class MappingNetwork(Module):
    """z -> w: RMS-normalize z, then ``depth`` leaky-ReLU linear layers."""

    def __init__(self, latent_dim: int, depth: int, rng: np.random.Generator, lr_mul: float = 0.01):
        self.latent_dim = latent_dim
        self.layers = [EqualLinear(latent_dim, latent_dim, rng, lr_mul=lr_mul, activate=True) for _ in range(depth)]

    def forward(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent has {z.shape[-1]} components, expected {self.latent_dim}")
        x = z * ((z * z).mean(axis=-1, keepdims=True) + 1e-8) ** -0.5
        for layer in self.layers:
            x = layer(x)
        return x
