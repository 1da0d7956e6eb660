"""Sparse Mixture-of-Experts MLP layer with top-K routing.

Each MoE layer owns a linear router over E experts and E independent
two-layer GELU MLPs. Per token the router's softmax is truncated to its
top-K entries, the kept gates renormalized to sum to one, and only the
selected experts run (tokens are gathered per expert and scattered back).
Routing statistics feed the expert-level balance loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError, ShapeError
from .nn import Linear, Mlp
from .numerics import Tensor


@dataclass(frozen=True)
class MoEConfig:
    """Expert count E, active count K, placement frequency, and balance weight."""

    num_experts: int
    active: int
    frequency: int = 1
    shared_experts: int = 0
    balance_alpha: float = 0.01

    def __post_init__(self):
        if not 1 <= self.active <= self.num_experts:
            raise ConfigError(f"active experts {self.active} outside [1, {self.num_experts}]")
        if self.frequency < 1:
            raise ConfigError("MoE frequency must be >= 1")
        if self.shared_experts < 0:
            raise ConfigError("shared expert count must be >= 0")

    def describe(self) -> str:
        return f"{self.num_experts}E{self.active}A"


MOE_PRESETS = {
    "8E2A": MoEConfig(num_experts=8, active=2, frequency=1),
    "4E1A": MoEConfig(num_experts=4, active=1, frequency=2),
}


@dataclass
class RoutingStats:
    """Per-forward routing records consumed by balance_loss.

    indicators are constant 0/1 arrays; probs stay live tensors so the
    balance loss is differentiable through the router.
    """

    active: int = 0
    indicators: list = field(default_factory=list)
    probs: list = field(default_factory=list)

    def record(self, indicator: np.ndarray, probs: Tensor, active: int) -> None:
        self.active = active
        self.indicators.append(indicator)
        self.probs.append(probs)

    def clear(self) -> None:
        self.indicators.clear()
        self.probs.clear()

    def __len__(self) -> int:
        return len(self.indicators)


def _topk_from_probs(probs: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the top-k probabilities per row, renormalized; ties keep lower index."""
    p = probs.data
    order = np.argsort(-p, axis=1, kind="stable")
    kept = order[:, :k]
    indicator = np.zeros_like(p)
    np.put_along_axis(indicator, kept, 1.0, axis=1)
    masked = nm.mul(probs, Tensor(indicator))
    gates = nm.div(masked, nm.tsum(masked, axis=1, keepdims=True))
    return gates, indicator


def route_topk(logits: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Softmax the router logits and keep the top-k gates per token.

    Returns (gates, assignment): gates is [T, E] with exactly k nonzero
    entries per row summing to one; assignment is the 0/1 indicator of the
    kept experts.
    """
    if k > logits.shape[1]:
        raise ConfigError(f"K={k} exceeds expert count {logits.shape[1]}")
    probs = nm.softmax(logits, axis=1)
    return _topk_from_probs(probs, k)


class MoELayer:
    """Router + E expert MLPs with top-K dispatch and optional shared experts."""

    def __init__(self, rng: np.random.Generator, width: int, config: MoEConfig,
                 mlp_ratio: int = 4):
        self.width = width
        self.config = config
        self.router = Linear(rng, width, config.num_experts)
        self.experts = [Mlp(rng, width, mlp_ratio) for _ in range(config.num_experts)]
        self.shared = [Mlp(rng, width, mlp_ratio) for _ in range(config.shared_experts)]
        self.stats = RoutingStats()
        self.capture_stats = False

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"MoE layer expects [T, {self.width}], got {x.shape}")
        tokens = x.shape[0]
        probs = nm.softmax(self.router(x), axis=1)
        gates, indicator = _topk_from_probs(probs, self.config.active)
        if self.capture_stats:
            self.stats.record(indicator, probs, self.config.active)

        out = nm.zeros((tokens, self.width))
        for e, expert in enumerate(self.experts):
            idx = np.nonzero(indicator[:, e])[0]
            if idx.size == 0:
                continue
            rows = nm.gather_rows(x, idx)
            gate_rows = nm.gather_rows(nm.slice_axis(gates, 1, e, e + 1), idx)
            weighted = nm.mul(expert(rows), gate_rows)
            out = nm.add(out, nm.scatter_rows(weighted, idx, tokens))
        for expert in self.shared:
            out = nm.add(out, expert(x))
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, t in self.router.params().items():
            out[f"router.{k}"] = t
        for e, expert in enumerate(self.experts):
            for k, t in expert.params().items():
                out[f"experts.{e}.{k}"] = t
        for s, expert in enumerate(self.shared):
            for k, t in expert.params().items():
                out[f"shared.{s}.{k}"] = t
        return out


def balance_loss(stats: RoutingStats, alpha: float) -> Tensor:
    """Expert-level load-balance penalty alpha * E * sum_i f_i * mean_prob_i.

    f_i is expert i's share of assignments normalized by K*T; mean_prob_i is
    the router's average probability for expert i. The product form reaches
    its minimum, alpha, exactly at uniform routing.
    """
    if len(stats) == 0:
        raise InputError("balance_loss needs statistics from at least one forward")
    total_tokens = sum(ind.shape[0] for ind in stats.indicators)
    num_experts = stats.indicators[0].shape[1]
    counts = np.zeros(num_experts, dtype=np.float64)
    for ind in stats.indicators:
        counts += ind.sum(axis=0)
    load = Tensor(counts / (stats.active * total_tokens))

    prob_sum = nm.tsum(stats.probs[0], axis=0)
    for p in stats.probs[1:]:
        prob_sum = nm.add(prob_sum, nm.tsum(p, axis=0))
    mean_prob = nm.mul(prob_sum, 1.0 / total_tokens)
    return nm.mul(nm.tsum(nm.mul(load, mean_prob)), float(alpha) * num_experts)
