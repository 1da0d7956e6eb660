"""Configurable DiT-style denoising transformer.

Patch embedding with fixed 2-D sin-cos positional encodings, sinusoidal
timestep + class-label conditioning, adaLN-Zero transformer blocks with a
pluggable attention variant and a dense MLP or sparse MoE feed-forward, and
a final modulated projection back to patches. The learned-variance output
convention is kept: the network emits 2*in_channels channels, of which the
first half is the noise prediction.

Checkpoints are a JSON manifest (names, shapes, byte offsets) plus a single
little-endian float32 blob; round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .attention import AttentionVariant, build_attention
from .errors import ConfigError, ContractError, InputError, ShapeError
from .moe import MoEConfig, MoELayer
from .nn import Linear, Mlp
from .numerics import Tensor

FREQ_EMBED_DIM = 256  # sinusoidal timestep feature width before the MLP


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    hidden: int
    heads: int
    patch: int
    input_size: int = 32
    in_channels: int = 4
    mlp_ratio: int = 4
    num_classes: int = 1000
    attention: AttentionVariant = AttentionVariant()
    moe: Optional[MoEConfig] = None
    cfg_dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 4 != 0:
            raise ConfigError("hidden size must be a multiple of 4 (2-D sin-cos positions)")
        if self.input_size % self.patch != 0:
            raise ConfigError(f"input size {self.input_size} not divisible by patch {self.patch}")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1]")
        self.attention.validate(self.hidden, self.heads, self.tokens)

    @property
    def grid(self) -> int:
        return self.input_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def null_label(self) -> int:
        return self.num_classes

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels


BASE_PRESETS = {
    "S/2": dict(depth=12, hidden=384, heads=6, patch=2),
    "S/4": dict(depth=12, hidden=384, heads=6, patch=4),
    "XS/2": dict(depth=6, hidden=256, heads=4, patch=2),
    "XS/4": dict(depth=6, hidden=256, heads=4, patch=4),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    """Build a ModelConfig from a preset name (S/2, S/4, XS/2, XS/4)."""
    if name not in BASE_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(BASE_PRESETS)}")
    fields = dict(BASE_PRESETS[name])
    fields.update(overrides)
    return ModelConfig(**fields)


def config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["attention"] = AttentionVariant(**d.get("attention", {}))
    moe = d.get("moe")
    d["moe"] = MoEConfig(**moe) if moe else None
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Conditioning embedders


def timestep_sinusoid(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal frequency features [cos | sin] of shape [B, dim]; dim even."""
    if dim % 2 != 0:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise InputError("timesteps must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(np.float32)


class TimestepEmbedder:
    """Fixed sinusoid followed by a learned 2-layer SiLU MLP."""

    def __init__(self, rng: np.random.Generator, hidden: int):
        self.fc1 = Linear(rng, FREQ_EMBED_DIM, hidden, init="normal")
        self.fc2 = Linear(rng, hidden, hidden, init="normal")

    def __call__(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_sinusoid(t, FREQ_EMBED_DIM))
        return self.fc2(nm.silu(self.fc1(feats)))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        return out


class LabelEmbedder:
    """Class-label table with one extra null row for unconditional passes.

    During training each label is independently replaced by the null row
    with probability cfg_dropout (classifier-free guidance training).
    """

    def __init__(self, rng: np.random.Generator, num_classes: int, hidden: int,
                 cfg_dropout: float):
        self.num_classes = num_classes
        self.cfg_dropout = cfg_dropout
        self.table = Tensor((rng.standard_normal((num_classes + 1, hidden)) * 0.02
                             ).astype(np.float32), requires_grad=True)

    def __call__(self, y: np.ndarray, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        ids = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if np.any(ids < 0) or np.any(ids > self.num_classes):
            raise InputError(f"label ids must lie in [0, {self.num_classes}] "
                             f"({self.num_classes} is the null label)")
        if training and self.cfg_dropout > 0.0:
            if rng is None:
                raise ContractError("label dropout needs the training rng")
            drop = rng.random(ids.shape[0]) < self.cfg_dropout
            ids = np.where(drop, self.num_classes, ids)
        return nm.embedding(self.table, ids)

    def params(self) -> dict[str, Tensor]:
        return {"table": self.table}


def sincos_pos_embed(hidden: int, side: int) -> np.ndarray:
    """Fixed 2-D sin-cos position table [side*side, hidden] (not learned)."""
    def axis_embed(pos: np.ndarray, dim: int) -> np.ndarray:
        omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
        out = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    ys, xs = np.meshgrid(np.arange(side, dtype=np.float64),
                         np.arange(side, dtype=np.float64), indexing="ij")
    emb = np.concatenate([axis_embed(ys.reshape(-1), hidden // 2),
                          axis_embed(xs.reshape(-1), hidden // 2)], axis=1)
    return emb.astype(np.float32)


# ---------------------------------------------------------------------------
# Blocks


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nm.add(nm.mul(x, nm.add(scale, 1.0)), shift)


class DiTBlock:
    """adaLN-Zero transformer block: attention then MLP/MoE on a residual stream."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig, use_moe: bool):
        hidden = config.hidden
        self.hidden = hidden
        self.adaln = Linear(rng, hidden, 6 * hidden, init="zeros")
        self.attn = build_attention(rng, config.attention, hidden, config.heads)
        self.moe = MoELayer(rng, hidden, config.moe, config.mlp_ratio) if use_moe else None
        self.mlp = None if use_moe else Mlp(rng, hidden, config.mlp_ratio)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, n_tok, c = x.shape
        mod = self.adaln(nm.silu(cond))
        chunks = [nm.reshape(nm.slice_axis(mod, 1, i * c, (i + 1) * c), (b, 1, c))
                  for i in range(6)]
        shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp = chunks

        h = modulate(nm.layer_norm(x), shift_attn, scale_attn)
        x = nm.add(x, nm.mul(gate_attn, self.attn(h)))

        h = modulate(nm.layer_norm(x), shift_mlp, scale_mlp)
        if self.moe is not None:
            flat = nm.reshape(h, (b * n_tok, c))
            ff = nm.reshape(self.moe(flat), (b, n_tok, c))
        else:
            ff = self.mlp(h)
        return nm.add(x, nm.mul(gate_mlp, ff))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.adaln.params().items():
            out[f"adaln.{k}"] = v
        for k, v in self.attn.params().items():
            out[f"attn.{k}"] = v
        ff = self.moe if self.moe is not None else self.mlp
        ff_name = "moe" if self.moe is not None else "mlp"
        for k, v in ff.params().items():
            out[f"{ff_name}.{k}"] = v
        return out


class FinalLayer:
    """Modulated norm + zero-initialized projection back to patch pixels."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        hidden = config.hidden
        self.hidden = hidden
        self.adaln = Linear(rng, hidden, 2 * hidden, init="zeros")
        self.linear = Linear(rng, hidden, config.patch ** 2 * config.out_channels,
                             init="zeros")

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, _, c = x.shape
        mod = self.adaln(nm.silu(cond))
        shift = nm.reshape(nm.slice_axis(mod, 1, 0, c), (b, 1, c))
        scale = nm.reshape(nm.slice_axis(mod, 1, c, 2 * c), (b, 1, c))
        return self.linear(modulate(nm.layer_norm(x), shift, scale))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.adaln.params().items():
            out[f"adaln.{k}"] = v
        for k, v in self.linear.params().items():
            out[f"linear.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# Patch geometry


def patchify(x: Tensor, patch: int) -> Tensor:
    """[B, C, H, W] -> [B, N, patch*patch*C] with (py, px, channel) patch layout."""
    b, c, h, w = x.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"spatial size {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    t = nm.reshape(x, (b, c, hp, patch, wp, patch))
    t = nm.transpose(t, (0, 2, 4, 3, 5, 1))
    return nm.reshape(t, (b, hp * wp, patch * patch * c))


def unpatchify(tokens: Tensor, patch: int, side: int, channels: int) -> Tensor:
    """Inverse of patchify: [B, N, patch*patch*C] -> [B, C, H, W]."""
    b = tokens.shape[0]
    t = nm.reshape(tokens, (b, side, side, patch, patch, channels))
    t = nm.transpose(t, (0, 5, 1, 3, 2, 4))
    return nm.reshape(t, (b, channels, side * patch, side * patch))


# ---------------------------------------------------------------------------
# Model


class DiTModel:
    """A constructed denoising network; immutable during inference."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        hidden = config.hidden
        self.patch_embed = Linear(rng, config.patch ** 2 * config.in_channels, hidden)
        self.pos_embed = Tensor(sincos_pos_embed(hidden, config.grid)[None, :, :])
        self.t_embedder = TimestepEmbedder(rng, hidden)
        self.y_embedder = LabelEmbedder(rng, config.num_classes, hidden, config.cfg_dropout)
        self.blocks = []
        for i in range(config.depth):
            use_moe = config.moe is not None and i % config.moe.frequency == 0
            self.blocks.append(DiTBlock(rng, config, use_moe))
        self.final = FinalLayer(rng, config)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.patch_embed.params().items():
            out[f"patch_embed.{k}"] = v
        for k, v in self.t_embedder.params().items():
            out[f"t_embed.{k}"] = v
        for k, v in self.y_embedder.params().items():
            out[f"label_embed.{k}"] = v
        for i, block in enumerate(self.blocks):
            for k, v in block.params().items():
                out[f"blocks.{i}.{k}"] = v
        for k, v in self.final.params().items():
            out[f"final.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def moe_layers(self) -> list[MoELayer]:
        return [b.moe for b in self.blocks if b.moe is not None]

    def set_router_capture(self, flag: bool) -> None:
        for layer in self.moe_layers():
            layer.capture_stats = flag
            if not flag:
                layer.stats.clear()

    # -- forward ------------------------------------------------------------

    def forward(self, x_t: Tensor, t, y, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if x_t.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W] input, got {x_t.shape}")
        b, cin, h, w = x_t.shape
        if cin != cfg.in_channels or h != cfg.input_size or w != cfg.input_size:
            raise ShapeError(f"input {x_t.shape} incompatible with config "
                             f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")
        tokens = patchify(x_t, cfg.patch)
        x = nm.add(self.patch_embed(tokens), self.pos_embed)
        cond = nm.add(self.t_embedder(np.broadcast_to(np.asarray(t), (b,))),
                      self.y_embedder(np.broadcast_to(np.asarray(y), (b,)), training, rng))
        for block in self.blocks:
            x = block(x, cond)
        out = self.final(x, cond)
        return unpatchify(out, cfg.patch, cfg.grid, cfg.out_channels)

    __call__ = forward


# ---------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_FORMAT = "ditopt-checkpoint"


def checkpoint_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(model: DiTModel, stem) -> Path:
    """Write manifest JSON + little-endian float32 blob; returns manifest path."""
    manifest_path, blob_path = checkpoint_paths(stem)
    entries = []
    blob = bytearray()
    for name, tensor in model.named_parameters().items():
        raw = tensor.data.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape),
                        "offset": len(blob), "nbytes": len(raw)})
        blob.extend(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "f32",
        "config": config_to_dict(model.config),
        "tensors": entries,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    blob_path.write_bytes(bytes(blob))
    return manifest_path


def load_checkpoint(stem) -> DiTModel:
    """Rebuild a model from a float32 checkpoint, bit-exactly."""
    manifest_path, blob_path = checkpoint_paths(stem)
    if not manifest_path.exists():
        raise InputError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{manifest_path} is not a ditopt checkpoint")
    if manifest.get("dtype") != "f32":
        raise InputError("quantized checkpoint: load it with "
                         "ditopt.compress.load_quantized_checkpoint")
    config = config_from_dict(manifest["config"])
    model = DiTModel(config, seed=0)
    params = model.named_parameters()
    blob = blob_path.read_bytes()
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params:
            raise InputError(f"checkpoint tensor {name!r} not in model")
        arr = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4,
                            offset=entry["offset"]).reshape(entry["shape"])
        params[name].data = np.ascontiguousarray(arr, dtype=np.float32)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise InputError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
    return model
