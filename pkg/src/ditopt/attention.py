"""The four interchangeable attention implementations under study.

All variants map [B, N, C] -> [B, N, C]:

* baseline   -- softmax(QK^T / sqrt(d)) V, h heads of dimension C/h
* shallow    -- same, but Q/K/V projected to width C/2 (head dim C/2h)
* mediated   -- n pooled mediator tokens T stand between Q and K/V, two
                softmax stages each O(N*n*C), plus a depthwise conv of V
* focused    -- softmax-free: an odd-power norm-preserving "focusing" map on
                Q and K lets K^T V be multiplied first; K/V use h/G grouped
                heads shared across G query heads each
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError
from .nn import Linear
from .numerics import Tensor

FOCUS_EPS = 1e-6  # denominator guard for the normalized linear attention


@dataclass(frozen=True)
class AttentionVariant:
    """Tagged selection of an attention implementation and its knobs."""

    tag: str = "baseline"          # baseline | shallow | mediated | focused
    n: int = 4                     # mediated: mediator-token count
    dwc_kernel: int = 3            # mediated: depthwise conv kernel size
    p: int = 3                     # focused: focusing power
    G: int = 1                     # focused: query-group factor
    rectify: bool = False          # focused: ReLU Q,K before the power map

    def validate(self, hidden: int, heads: int, tokens: int) -> None:
        if hidden % heads != 0:
            raise ConfigError(f"hidden {hidden} not divisible by heads {heads}")
        if self.tag == "shallow":
            if hidden % 2 != 0:
                raise ConfigError("shallow attention requires even hidden size")
            if (hidden // 2) % heads != 0:
                raise ConfigError("shallow attention requires heads to divide hidden/2")
        elif self.tag == "mediated":
            if not 1 <= self.n <= tokens:
                raise ConfigError(f"mediator count {self.n} outside [1, {tokens}]")
            if self.dwc_kernel % 2 == 0:
                raise ConfigError("depthwise kernel size must be odd")
        elif self.tag == "focused":
            if heads % self.G != 0:
                raise ConfigError(f"G={self.G} does not divide heads={heads}")
            if self.p < 1:
                raise ConfigError("focusing power must be >= 1")
        elif self.tag != "baseline":
            raise ConfigError(f"unknown attention variant {self.tag!r}")

    def describe(self) -> str:
        if self.tag == "mediated":
            return f"med-{self.n}"
        if self.tag == "focused":
            return f"fg-{self.G}"
        return self.tag


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, N, h*d] -> [B, h, N, d]"""
    b, n, c = x.shape
    return nm.transpose(nm.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, N, d] -> [B, N, h*d]"""
    b, h, n, d = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def focusing_transform(x: Tensor, p: int) -> Tensor:
    """Rescale each feature row of x**p back to the row's original L2 norm.

    Odd p keeps signs and sharpens the dominant component. Zero rows pass
    through unchanged (the continuous limit of the 0/0 scale).
    """
    if p < 1:
        raise ConfigError(f"focusing power must be >= 1, got {p}")
    nsq = nm.tsum(nm.mul(x, x), axis=-1, keepdims=True)
    # constant indicator keeps sqrt away from 0 on all-zero rows
    guard = Tensor((nsq.data == 0.0).astype(np.float32))
    norm_x = nm.sqrt(nm.add(nsq, guard))
    xp = nm.powi(x, p)
    nsq_p = nm.tsum(nm.mul(xp, xp), axis=-1, keepdims=True)
    norm_p = nm.sqrt(nm.add(nsq_p, guard))
    return nm.mul(xp, nm.div(norm_x, norm_p))


class BaselineAttention:
    """Standard multi-head scaled dot-product attention."""

    tag = "baseline"

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int):
        self.hidden = hidden
        self.heads = heads
        self.inner = hidden
        self.head_dim = hidden // heads
        self.wq = Linear(rng, hidden, hidden)
        self.wk = Linear(rng, hidden, hidden)
        self.wv = Linear(rng, hidden, hidden)
        self.wout = Linear(rng, hidden, hidden)

    def _qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.wq(x), self.wk(x), self.wv(x)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self._qkv(x)
        qh = split_heads(q, self.heads)
        kh = split_heads(k, self.heads)
        vh = split_heads(v, self.heads)
        scale = 1.0 / np.sqrt(self.head_dim)
        logits = nm.mul(nm.matmul(qh, nm.transpose(kh, (0, 1, 3, 2))), scale)
        attn = nm.softmax(logits, axis=-1)
        out = merge_heads(nm.matmul(attn, vh))
        return self.wout(out)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wout", self.wout)):
            for k, t in layer.params().items():
                out[f"{name}.{k}"] = t
        return out


class ShallowAttention(BaselineAttention):
    """Baseline attention with the internal width halved (C x C/2 projections)."""

    tag = "shallow"

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int):
        if hidden % 2 != 0:
            raise ConfigError("shallow attention requires even hidden size")
        self.hidden = hidden
        self.heads = heads
        self.inner = hidden // 2
        self.head_dim = self.inner // heads
        self.wq = Linear(rng, hidden, self.inner)
        self.wk = Linear(rng, hidden, self.inner)
        self.wv = Linear(rng, hidden, self.inner)
        self.wout = Linear(rng, self.inner, hidden)


class MediatedAttention(BaselineAttention):
    """Two-stage attention through n pooled mediator tokens.

    T = adaptive_avg_pool(Q); V_med = softmax(T K^T / sqrt(d)) V; the output
    is softmax(Q T^T / sqrt(d)) V_med plus a depthwise convolution of V as a
    local-feature path. The mediator-path products carry no bias terms.
    """

    tag = "mediated"

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int,
                 n: int = 4, dwc_kernel: int = 3):
        super().__init__(rng, hidden, heads)
        self.n = n
        self.dwc = Tensor((rng.standard_normal((hidden, dwc_kernel, dwc_kernel)) * 0.02
                           ).astype(np.float32), requires_grad=True)

    def __call__(self, x: Tensor, mediator_tokens: Tensor | None = None) -> Tensor:
        q, k, v = self._qkv(x)
        qh = split_heads(q, self.heads)
        kh = split_heads(k, self.heads)
        vh = split_heads(v, self.heads)
        mediators = mediator_tokens if mediator_tokens is not None \
            else nm.adaptive_avg_pool_tokens(qh, self.n)
        scale = 1.0 / np.sqrt(self.head_dim)
        stage1 = nm.softmax(nm.mul(nm.matmul(mediators, nm.transpose(kh, (0, 1, 3, 2))), scale), axis=-1)
        v_med = nm.matmul(stage1, vh)
        stage2 = nm.softmax(nm.mul(nm.matmul(qh, nm.transpose(mediators, (0, 1, 3, 2))), scale), axis=-1)
        out = merge_heads(nm.matmul(stage2, v_med))

        n_tok = x.shape[1]
        side = int(round(np.sqrt(n_tok)))
        local = nm.depthwise_conv_tokens(v, (side, n_tok // side), self.dwc)
        return self.wout(nm.add(out, local))

    def params(self) -> dict[str, Tensor]:
        out = super().params()
        out["dwc.kernel"] = self.dwc
        return out


class FocusedAttention:
    """Focused grouped-query attention: (K^T V)-first, softmax-free.

    Q keeps h heads; K and V are projected to h/G heads, each shared by G
    query heads (query head i uses KV head i // G). Outputs are normalized
    by Q_p (K_p^T 1) + eps so magnitudes stay O(1) in N.
    """

    tag = "focused"

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int,
                 p: int = 3, G: int = 1, rectify: bool = False):
        if heads % G != 0:
            raise ConfigError(f"G={G} does not divide heads={heads}")
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.p = p
        self.G = G
        self.rectify = rectify
        self.kv_heads = heads // G
        self.wq = Linear(rng, hidden, hidden)
        self.wk = Linear(rng, hidden, hidden // G)
        self.wv = Linear(rng, hidden, hidden // G)
        self.wout = Linear(rng, hidden, hidden)

    def _focus(self, t: Tensor) -> Tensor:
        if self.rectify:
            t = nm.mul(t, Tensor((t.data > 0).astype(np.float32)))
        return focusing_transform(t, self.p)

    def __call__(self, x: Tensor) -> Tensor:
        b, n_tok, _ = x.shape
        qh = split_heads(self.wq(x), self.heads)          # [B, h, N, d]
        kh = split_heads(self.wk(x), self.kv_heads)        # [B, h/G, N, d]
        vh = split_heads(self.wv(x), self.kv_heads)
        qp = self._focus(qh)
        kp = self._focus(kh)

        kv = nm.matmul(nm.transpose(kp, (0, 1, 3, 2)), vh)           # [B, h/G, d, d]
        k_sum = nm.tsum(kp, axis=-2, keepdims=True)                   # [B, h/G, 1, d]

        d = self.head_dim
        q_grp = nm.reshape(qp, (b, self.kv_heads, self.G, n_tok, d))
        numer = nm.matmul(q_grp, nm.reshape(kv, (b, self.kv_heads, 1, d, d)))
        k_sum_grp = nm.reshape(k_sum, (b, self.kv_heads, 1, 1, d))
        denom = nm.add(nm.tsum(nm.mul(q_grp, k_sum_grp), axis=-1, keepdims=True), FOCUS_EPS)
        out = nm.div(numer, denom)
        out = merge_heads(nm.reshape(out, (b, self.heads, n_tok, d)))
        return self.wout(out)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wout", self.wout)):
            for k, t in layer.params().items():
                out[f"{name}.{k}"] = t
        return out


def build_attention(rng: np.random.Generator, variant: AttentionVariant,
                    hidden: int, heads: int):
    """Instantiate the attention layer a variant tag selects."""
    if variant.tag == "baseline":
        return BaselineAttention(rng, hidden, heads)
    if variant.tag == "shallow":
        return ShallowAttention(rng, hidden, heads)
    if variant.tag == "mediated":
        return MediatedAttention(rng, hidden, heads, n=variant.n, dwc_kernel=variant.dwc_kernel)
    if variant.tag == "focused":
        return FocusedAttention(rng, hidden, heads, p=variant.p, G=variant.G,
                                rectify=variant.rectify)
    raise ConfigError(f"unknown attention variant {variant.tag!r}")
