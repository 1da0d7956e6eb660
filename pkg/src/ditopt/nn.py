"""Small parameterized layers shared by the model modules.

Weights are stored (in_features, out_features) so a forward is x @ W + b and
a head's slice is a contiguous column range, matching how the attention
variants carve heads out of their projections.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


class Linear:
    """Dense layer y = x @ weight + bias."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 bias: bool = True, init: str = "xavier", std: float = 0.02):
        if init == "xavier":
            w = xavier_uniform(rng, in_dim, out_dim)
        elif init == "normal":
            w = (rng.standard_normal((in_dim, out_dim)) * std).astype(np.float32)
        elif init == "zeros":
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = nm.matmul(x, self.weight)
        if self.bias is not None:
            out = nm.add(out, self.bias)
        return out

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


class Mlp:
    """Two-layer GELU MLP (hidden = ratio * width), the DiT block feed-forward."""

    def __init__(self, rng: np.random.Generator, width: int, ratio: int = 4):
        self.fc1 = Linear(rng, width, ratio * width)
        self.fc2 = Linear(rng, ratio * width, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.gelu(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        return out


def flatten_params(obj_params: dict[str, Tensor], prefix: str = "") -> dict[str, Tensor]:
    """Prefix a param dict's keys (checkpoint naming helper)."""
    return {f"{prefix}{k}": v for k, v in obj_params.items()}
