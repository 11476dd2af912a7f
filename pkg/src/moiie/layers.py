"""Parameter containers and the dense transformer pieces."""

from __future__ import annotations

import copy
import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Walks attributes to find parameters.

    Every :class:`Tensor` attribute is a parameter; nested modules, lists of
    modules and dicts of modules are traversed in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for sub, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{sub}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()], dtype=np.int64))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def clone(self):
        return copy.deepcopy(self)


def init_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, std: float = 0.02):
        self.weight = ad.parameter(init_normal(rng, (d_in, d_out), std, dtype))
        if bias:
            self.bias = ad.parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        bias = getattr(self, "bias", None)
        return y if bias is None else ad.bias_add(y, bias)


class FFN(Module):
    """Two affine maps with GeLU between; the caller adds the residual."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=np.float64, std: float = 0.02):
        self.fc1 = Linear(d, hidden, rng, dtype, std=std)
        self.fc2 = Linear(hidden, d, rng, dtype, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class RMSNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-6):
        self.gain = ad.parameter(np.ones(d, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.rms_norm(x, self.gain, self._eps)


class Attention(Module):
    """Pre-norm causal multi-head self-attention with a residual connection."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % n_heads:
            raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
        self.norm = RMSNorm(d, dtype)
        # Fan-in scaled projections. At a 0.02 scale the query-key product starts
        # so small that content-based lookups over many patches stall on a plateau.
        std = d ** -0.5
        self.q = Linear(d, d, rng, dtype, bias=False, std=std)
        self.k = Linear(d, d, rng, dtype, bias=False, std=std)
        self.v = Linear(d, d, rng, dtype, bias=False, std=std)
        self.o = Linear(d, d, rng, dtype, bias=False, std=std)
        self._heads = n_heads

    def _split(self, x: Tensor, b: int, s: int) -> Tensor:
        dh = x.shape[-1] // self._heads
        return ad.transpose(ad.reshape(x, (b, s, self._heads, dh)), (0, 2, 1, 3))

    def mix(self, x: Tensor) -> Tensor:
        """Attention output before the output projection, shape ``[B, S, d]``."""
        b, s, d = x.shape
        h = self.norm(x)
        q = self._split(self.q(h), b, s)
        k = self._split(self.k(h), b, s)
        v = self._split(self.v(h), b, s)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self._heads))
        causal = np.tril(np.ones((s, s), dtype=bool))
        weights = ad.softmax(ad.masked_fill(scores, causal, -1e9), axis=-1)
        ctx = ad.matmul(weights, v)
        return ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, d))

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.o(self.mix(x))
