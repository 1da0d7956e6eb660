"""Dense float32 tensor core with reverse-mode autodiff.

Tensors wrap C-contiguous float32 numpy buffers. Differentiable operations
are module-level functions; each one that runs under an active GradTape
records itself, and backward rules live in an explicit registry keyed by op
name (OP_REGISTRY) rather than behind operator overloading. Gradients always
accumulate with +=, never overwrite, so tensors reused by several ops (Q fed
to both pooling and attention, say) come out right.

A process-wide MacMeter counts multiply-accumulates of every matmul and
depthwise conv; the analytical cost model checks itself against it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "OP_REGISTRY",
    "mac_meter",
    "counting_macs",
    "add", "sub", "mul", "div", "neg", "matmul", "reshape", "transpose",
    "tsum", "tmean", "powi", "sqrt", "exp", "softmax", "gelu", "silu",
    "layer_norm", "embedding", "gather_rows", "scatter_rows", "slice_axis",
    "adaptive_avg_pool_tokens", "depthwise_conv_tokens",
    "zeros", "ones", "randn", "as_tensor", "grad_check",
]


class Tensor:
    """Row-major float32 N-d array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add g into the grad buffer (allocating zeros on first touch)."""
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; every dunder routes through the registered ops,
    # so recording/backward behavior is identical to the functional API.
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(_wrap(other, self), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def reshape(self, *shape): return reshape(self, shape if len(shape) > 1 else shape[0])
    def transpose(self, axes): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# Tape machinery


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "ctx")

    def __init__(self, name, inputs, output, ctx):
        self.name = name
        self.inputs = inputs      # tuple of Tensors (non-diff args live in ctx)
        self.output = output
        self.ctx = ctx


class GradTape:
    """Ordered record of executed ops; replaying it in reverse accumulates grads.

    Use as a context manager around the forward pass, then call backward()
    on the (scalar or seeded) output. A tape that recorded nothing yields
    zero gradients everywhere.
    """

    def __init__(self):
        self.records: list[_OpRecord] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(output)/d(input) into .grad of every tensor on the tape.

        seed defaults to ones (for a scalar output this is the usual df=1).
        """
        if seed is None:
            seed = np.ones_like(output.data)
        output.accumulate_grad(np.asarray(seed, dtype=np.float32))
        for rec in reversed(self.records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            rule = OP_REGISTRY[rec.name]
            grads = rule(rec.ctx, out_grad)
            for tensor, g in zip(rec.inputs, grads):
                if tensor is None or g is None or not tensor.requires_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient out of op '{rec.name}'")
                tensor.accumulate_grad(g.astype(np.float32, copy=False))


_TAPE_STACK: list[GradTape] = []

# op name -> backward rule: fn(ctx, grad_out) -> tuple of grads per input
OP_REGISTRY: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn
    return deco


def _record(name: str, inputs: Sequence[Optional[Tensor]], out_data: np.ndarray, ctx) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t is not None and t.requires_grad for t in inputs)
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1].records.append(_OpRecord(name, tuple(inputs), out, ctx))
    return out


# ---------------------------------------------------------------------------
# MAC counting (matmul + conv only, the fvcore-style convention)


class MacMeter:
    """Counts multiply-accumulates of matmul/conv ops while enabled."""

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, macs: int) -> None:
        if self.enabled:
            self.total += int(macs)

    def reset(self) -> None:
        self.total = 0


mac_meter = MacMeter()


@contextlib.contextmanager
def counting_macs():
    """Enable the global MAC meter for the duration of the block."""
    prev_enabled, prev_total = mac_meter.enabled, mac_meter.total
    mac_meter.enabled, mac_meter.total = True, 0
    try:
        yield mac_meter
    finally:
        mac_meter.enabled, mac_meter.total = prev_enabled, prev_total


# ---------------------------------------------------------------------------
# Helpers


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcasting introduced or expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(std), requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise / arithmetic ops


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b)
    out = a.data + b.data
    return _record("add", (a, b), out, (a.data.shape, b.data.shape))


@_register("add")
def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b)
    out = a.data - b.data
    return _record("sub", (a, b), out, (a.data.shape, b.data.shape))


@_register("sub")
def _sub_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b)
    out = a.data * b.data
    return _record("mul", (a, b), out, (a.data, b.data))


@_register("mul")
def _mul_bw(ctx, g):
    da, db = ctx
    return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b)
    out = a.data / b.data
    return _record("div", (a, b), out, (a.data, b.data))


@_register("div")
def _div_bw(ctx, g):
    da, db = ctx
    return (_unbroadcast(g / db, da.shape),
            _unbroadcast(-g * da / (db * db), db.shape))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, None)


@_register("neg")
def _neg_bw(ctx, g):
    return (-g,)


def powi(a: Tensor, p: int) -> Tensor:
    """Elementwise integer power, sign-preserving for odd p."""
    if p < 1:
        raise ConfigError(f"powi exponent must be >= 1, got {p}")
    out = a.data ** p
    return _record("powi", (a,), out, (a.data, p))


@_register("powi")
def _powi_bw(ctx, g):
    da, p = ctx
    return (g * p * da ** (p - 1),)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, out)


@_register("sqrt")
def _sqrt_bw(ctx, g):
    return (g * 0.5 / ctx,)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, out)


@_register("exp")
def _exp_bw(ctx, g):
    return (g * ctx,)


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation (the DiT MLP nonlinearity)."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = np.float32(c) * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    out = np.float32(0.5) * x * (1.0 + t)
    return _record("gelu", (a,), out, (x, t))


@_register("gelu")
def _gelu_bw(ctx, g):
    x, t = ctx
    c = math.sqrt(2.0 / math.pi)
    du = np.float32(c) * (1.0 + 3.0 * np.float32(0.044715) * x * x)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return (g * d.astype(np.float32),)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _record("silu", (a,), out, (a.data, s))


@_register("silu")
def _silu_bw(ctx, g):
    x, s = ctx
    return (g * (s * (1.0 + x * (1.0 - s))).astype(np.float32),)


# ---------------------------------------------------------------------------
# Shape ops


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, a.data.shape)


@_register("reshape")
def _reshape_bw(ctx, g):
    return (g.reshape(ctx),)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    return _record("transpose", (a,), out, axes)


@_register("transpose")
def _transpose_bw(ctx, g):
    inv = np.argsort(ctx)
    return (g.transpose(inv),)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    out = a.data[tuple(idx)]
    return _record("slice_axis", (a,), out, (a.data.shape, axis, start, stop))


@_register("slice_axis")
def _slice_bw(ctx, g):
    shape, axis, start, stop = ctx
    full = np.zeros(shape, dtype=np.float32)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, stop)
    full[tuple(idx)] = g
    return (full,)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)
    return _record("sum", (a,), out, (a.data.shape, axis, keepdims))


@_register("sum")
def _sum_bw(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).astype(np.float32),)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    count = a.data.size // max(out.size, 1)
    return _record("mean", (a,), out, (a.data.shape, axis, keepdims, count))


@_register("mean")
def _mean_bw(ctx, g):
    shape, axis, keepdims, count = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return ((np.broadcast_to(g, shape) / count).astype(np.float32),)


# ---------------------------------------------------------------------------
# Matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from e
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    mac_meter.add(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = a.data @ b.data
    return _record("matmul", (a, b), out, (a.data, b.data))


@_register("matmul")
def _matmul_bw(ctx, g):
    da, db = ctx
    ga = g @ np.swapaxes(db, -1, -2)
    gb = np.swapaxes(da, -1, -2) @ g
    return (_unbroadcast(ga, da.shape).astype(np.float32),
            _unbroadcast(gb, db.shape).astype(np.float32))


# ---------------------------------------------------------------------------
# Softmax / layer norm


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along `axis` (max subtraction)."""
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", (x,), out, (out, axis))


@_register("softmax")
def _softmax_bw(ctx, g):
    y, axis = ctx
    dot = (g * y).sum(axis=axis, keepdims=True)
    return ((y * (g - dot)).astype(np.float32),)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance; no affine params."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv
    return _record("layer_norm", (x,), out, (out.astype(np.float32), inv))


@_register("layer_norm")
def _layer_norm_bw(ctx, g):
    y, inv = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return ((inv * (g - gm - y * gym)).astype(np.float32),)


# ---------------------------------------------------------------------------
# Lookup / dispatch ops


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    return _record("embedding", (table,), out, (table.data.shape, ids))


@_register("embedding")
def _embedding_bw(ctx, g):
    shape, ids = ctx
    gt = np.zeros(shape, dtype=np.float32)
    np.add.at(gt, ids, g)
    return (gt,)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor (token dispatch)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]
    return _record("gather_rows", (x,), out, (x.data.shape, idx))


@_register("gather_rows")
def _gather_bw(ctx, g):
    shape, idx = ctx
    gx = np.zeros(shape, dtype=np.float32)
    np.add.at(gx, idx, g)
    return (gx,)


def scatter_rows(rows: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Place rows at positions idx of a zero [length, C] tensor (additively)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((length,) + rows.shape[1:], dtype=np.float32)
    np.add.at(out, idx, rows.data)
    return _record("scatter_rows", (rows,), out, idx)


@_register("scatter_rows")
def _scatter_bw(ctx, g):
    return (g[ctx],)


# ---------------------------------------------------------------------------
# Token-geometry ops


def _pool_buckets(total: int, n: int) -> np.ndarray:
    """Contiguous bucket boundaries: n+1 edges partitioning [0, total)."""
    return (np.arange(n + 1) * total) // n


def adaptive_avg_pool_tokens(q: Tensor, n: int) -> Tensor:
    """Mean-pool the second-to-last axis into n contiguous buckets.

    Buckets partition the token range with sizes differing by at most one,
    so n == N is the identity and n == 1 is the global token mean.
    """
    big = q.shape[-2]
    if not 1 <= n <= big:
        raise ConfigError(f"pool target {n} outside [1, {big}]")
    edges = _pool_buckets(big, n)
    sizes = np.diff(edges).astype(np.float32)
    sums = np.add.reduceat(q.data, edges[:-1], axis=-2)
    out = sums / sizes[:, None]
    return _record("adaptive_avg_pool_tokens", (q,), out, (q.data.shape, edges, sizes))


@_register("adaptive_avg_pool_tokens")
def _pool_bw(ctx, g):
    shape, edges, sizes = ctx
    scaled = g / sizes[:, None]
    gx = np.repeat(scaled, np.diff(edges), axis=-2)
    return (np.ascontiguousarray(gx, dtype=np.float32),)


def depthwise_conv_tokens(v: Tensor, grid: tuple[int, int], kernel: Tensor) -> Tensor:
    """Per-channel 2-D convolution of tokens laid out on an HxW grid.

    v is [..., N, C] with N == H*W; kernel is [C, k, k] with k odd; zero
    padding keeps the output the same shape as the input.
    """
    height, width = grid
    n_tok, chans = v.shape[-2], v.shape[-1]
    if n_tok != height * width:
        raise ShapeError(f"token count {n_tok} != grid {height}x{width}")
    k = kernel.shape[-1]
    if kernel.shape != (chans, k, k):
        raise ShapeError(f"kernel shape {kernel.shape} != ({chans}, k, k)")
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    lead = v.shape[:-2]
    batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
    mac_meter.add(batch * n_tok * chans * k * k)

    img = v.data.reshape(lead + (height, width, chans))
    r = k // 2
    pad_width = [(0, 0)] * len(lead) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(img, pad_width)
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            w = kernel.data[:, dy, dx]
            out += padded[..., dy:dy + height, dx:dx + width, :] * w
    out = out.reshape(v.shape)
    return _record("depthwise_conv_tokens", (v, kernel), out,
                   (v.data.shape, grid, k, padded, kernel.data))


@_register("depthwise_conv_tokens")
def _dwc_bw(ctx, g):
    v_shape, grid, k, padded, ker = ctx
    height, width = grid
    lead = v_shape[:-2]
    chans = v_shape[-1]
    gimg = g.reshape(lead + (height, width, chans))
    r = k // 2
    gpad = np.zeros_like(padded)
    gker = np.zeros_like(ker)
    for dy in range(k):
        for dx in range(k):
            patch = padded[..., dy:dy + height, dx:dx + width, :]
            gpad[..., dy:dy + height, dx:dx + width, :] += gimg * ker[:, dy, dx]
            reduce_axes = tuple(range(gimg.ndim - 1))
            gker[:, dy, dx] = (patch * gimg).sum(axis=reduce_axes)
    gv = gpad[..., r:r + height, r:r + width, :].reshape(v_shape)
    return (np.ascontiguousarray(gv, dtype=np.float32), gker.astype(np.float32))


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    f must produce a scalar tensor. x is perturbed elementwise; errors are
    |analytic - numeric| / (|numeric| + 1e-8), maximized over elements.
    """
    probe = x.copy()
    probe.requires_grad = True
    with GradTape() as tape:
        y = f(probe)
        if y.size != 1:
            raise ShapeError("grad_check target must be scalar-valued")
        tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("analytic gradient is non-finite")

    flat = probe.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(probe).item()
        flat[i] = orig - eps
        lo = f(probe).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    analytic64 = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(analytic64 - numeric) / (np.abs(numeric) + 1e-8)))
