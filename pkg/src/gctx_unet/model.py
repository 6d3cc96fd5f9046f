"""GCtx-UNet assembly, complexity accounting and checkpoint files.

Layout for an ``S x S`` input with embedding width ``C``::

    stem            3 -> C,   S/4
    encoder 1..3    GC-ViT stage, skip saved, downsample (C,2C,4C @ S/4,S/8,S/16)
    bottleneck      GC-ViT stage at 8C, S/32 (resolution and width unchanged)
    decoder 3..1    upsample, concat skip, 1x1 fuse back to stage width, GC-ViT stage
    head            LayerNorm, two x2 transposed convs (S/4 -> S), 1x1 conv to K
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, DimensionError, IntegrityError, MissingFileError, VersionError
from .nnblocks import (
    UPSAMPLERS,
    Conv2d,
    ConvTranspose2d,
    Downsample,
    GCViTStage,
    LayerNorm,
    Linear,
    PatchEmbed,
    RelPosBias,
    Upsample,
    WindowAttention,
)
from .optim import OptState

# Published reference figures for the full-size model.
REFERENCE_PARAMS = 12.34e6
REFERENCE_FLOPS = 30.41e9
REFERENCE_SIZE_MB = 49.75


@dataclass
class ModelConfig:
    img_size: int = 224
    in_channels: int = 3
    num_classes: int = 9
    embed_dim: int = 64
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    window_sizes: tuple[int, ...] = (7, 7, 14, 7)
    decoder_depths: tuple[int, ...] = (2, 2, 0)
    mlp_ratio: float = 3.0
    se_reduction: int = 4
    upsampler: str = "transposed_se"
    drop_path_rate: float = 0.0
    seed: int = 0

    @property
    def sides(self) -> list[int]:
        return [self.img_size // 4 // 2 ** i for i in range(4)]

    @property
    def dims(self) -> list[int]:
        return [self.embed_dim * 2 ** i for i in range(4)]

    def problems(self) -> list[str]:
        """Every violated invariant, as human-readable messages."""
        out = []
        for name in ("depths", "heads", "window_sizes"):
            if len(getattr(self, name)) != 4:
                out.append(f"{name} needs 4 entries, got {len(getattr(self, name))}")
        if len(self.decoder_depths) != 3:
            out.append(f"decoder_depths needs 3 entries, got {len(self.decoder_depths)}")
        if out:
            return out
        if self.img_size <= 0 or self.img_size % 32:
            out.append(f"img_size {self.img_size} must be a positive multiple of 32")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.embed_dim < 1:
            out.append("in_channels and embed_dim must be positive")
        for i, (d, h, w, side, dim) in enumerate(zip(self.depths, self.heads, self.window_sizes, self.sides, self.dims)):
            stage = i + 1
            if d < 2:
                out.append(f"stage {stage} depth {d} must be >= 2")
            if h < 1 or dim % h:
                out.append(f"stage {stage} width {dim} not divisible by {h} heads")
            if w < 1 or side < 1 or side % w:
                out.append(f"stage {stage} window size {w} does not divide feature side {side}")
            elif side // w & (side // w - 1):
                out.append(f"stage {stage} feature side {side} / window size {w} is not a power of two")
        for i, d in enumerate(self.decoder_depths):
            if d < 0:
                out.append(f"decoder stage {i + 1} depth {d} must be >= 0")
        if self.upsampler not in UPSAMPLERS:
            out.append(f"upsampler {self.upsampler!r} not one of {UPSAMPLERS}")
        if self.mlp_ratio <= 0:
            out.append("mlp_ratio must be positive")
        if self.se_reduction < 1:
            out.append("se_reduction must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            out.append("drop_path_rate must be in [0, 1)")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _coerce(cls.__dataclass_fields__[key].default, raw, key)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return cls.from_mapping(values)


def small_config(**overrides) -> ModelConfig:
    """The small configuration used for overfitting and CI."""
    base = dict(img_size=64, embed_dim=16, depths=(2, 2, 2, 2), window_sizes=(4, 4, 4, 2), num_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


def _coerce(default, raw, key):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    try:
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if isinstance(default, bool):
            return raw.lower() in {"1", "true", "yes", "on"}
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


# ---------------------------------------------------------------------------
# network


class SegHead(nn.Module):
    """S/4 -> S expansion by two x2 transposed convs, then per-pixel class logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.norm = LayerNorm(dim, channels_first=True)
        self.up1 = ConvTranspose2d(dim, dim, stride=2)
        self.up2 = ConvTranspose2d(dim, dim, stride=2)
        self.classify = Conv2d(dim, num_classes, 1)

    def forward(self, x):
        x = nx.gelu(self.up1(self.norm(x)))
        x = nx.gelu(self.up2(x))
        return self.classify(x)


class SkipFusion(nn.Module):
    """Concatenate decoder and skip features, then 1x1-project back to ``dim``."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = Linear(2 * dim, dim)

    def forward(self, x, skip):
        if x.shape != skip.shape:
            raise DimensionError(f"skip {tuple(skip.shape)} does not match decoder features {tuple(x.shape)}")
        y = nx.concat([x, skip], axis=1).permute(0, 2, 3, 1)
        return self.proj(y).permute(0, 3, 1, 2)


class GCtxUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        dims, sides = c.dims, c.sides
        rates = np.linspace(0.0, c.drop_path_rate, sum(c.depths)).tolist()
        offsets = np.cumsum((0,) + tuple(c.depths)).tolist()

        def stage(i, depth, rate):
            return GCViTStage(dims[i], depth, c.heads[i], c.window_sizes[i], sides[i], c.mlp_ratio, c.se_reduction, rate)

        self.stem = PatchEmbed(c.in_channels, c.embed_dim, c.se_reduction)
        self.encoder = nn.ModuleList(stage(i, c.depths[i], rates[offsets[i]]) for i in range(3))
        self.downsample = nn.ModuleList(Downsample(dims[i], dims[i + 1], c.se_reduction) for i in range(3))
        self.bottleneck = stage(3, c.depths[3], rates[offsets[3]])
        self.upsample = nn.ModuleList(Upsample(dims[i + 1], c.upsampler, c.se_reduction) for i in range(3))
        self.fuse = nn.ModuleList(SkipFusion(dims[i]) for i in range(3))
        self.decoder = nn.ModuleList(
            stage(i, c.decoder_depths[i], 0.0) if c.decoder_depths[i] > 0 else nn.Identity() for i in range(3)
        )
        self.head = SegHead(c.embed_dim, c.num_classes)
        self.trace: dict[str, tuple[int, ...]] | None = None

    def forward(self, img):
        c = self.config
        if img.dim() != 4 or tuple(img.shape[1:]) != (c.in_channels, c.img_size, c.img_size):
            raise DimensionError(
                f"expected input [B,{c.in_channels},{c.img_size},{c.img_size}], got {tuple(img.shape)}"
            )
        x = self.stem(img)
        skips = []
        for i in range(3):
            x = self.encoder[i](x)
            skips.append(x)
            self._record(f"encoder{i + 1}", x)
            x = self.downsample[i](x)
        self._record("bottleneck_in", x)
        x = self.bottleneck(x)
        self._record("bottleneck_out", x)
        for i in reversed(range(3)):
            x = self.upsample[i](x)
            x = self.fuse[i](x, skips[i])
            x = self.decoder[i](x)
            self._record(f"decoder{i + 1}", x)
        return nx.check_finite(self.head(x), "model output")

    def _record(self, name, x):
        if self.trace is not None:
            self.trace[name] = tuple(x.shape)

    def named_params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def init_parameters(model: nn.Module, rng: nx.Rng) -> None:
    """Deterministic init; each parameter draws from its own named child stream.

    Linear weights and relative-position tables: truncated normal, std 0.02.
    Conv weights: truncated normal, std 1/sqrt(fan_in).  Biases and norm
    offsets zero, norm scales one.
    """
    with torch.no_grad():
        for mod_name, mod in model.named_modules():
            r = rng.child("init", mod_name)
            if isinstance(mod, Linear):
                _fill(mod.weight, r.trunc_normal(tuple(mod.weight.shape), 0.02))
            elif isinstance(mod, Conv2d):
                fan_in = mod.weight[0].numel()
                _fill(mod.weight, r.trunc_normal(tuple(mod.weight.shape), 1.0 / math.sqrt(fan_in)))
            elif isinstance(mod, ConvTranspose2d):
                fan_in = mod.c_in * mod.kernel * mod.kernel // mod.stride ** 2
                _fill(mod.weight, r.trunc_normal(tuple(mod.weight.shape), 1.0 / math.sqrt(fan_in)))
            elif isinstance(mod, RelPosBias):
                _fill(mod.table, r.trunc_normal(tuple(mod.table.shape), 0.02))
            elif isinstance(mod, LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
            if isinstance(mod, (Linear, Conv2d, ConvTranspose2d)) and mod.bias is not None:
                mod.bias.zero_()


def _fill(p: torch.Tensor, values: np.ndarray) -> None:
    p.copy_(torch.from_numpy(values).to(p.dtype))


def build(config: ModelConfig, rng: nx.Rng | None = None, dtype: torch.dtype = torch.float32) -> GCtxUNet:
    """Construct and initialise a network; identical seeds give identical weights."""
    model = GCtxUNet(config)
    init_parameters(model, rng or nx.Rng(config.seed))
    return model.to(dtype)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# FLOPs


def _flop_hooks(model: nn.Module, counter: list[int]):
    def linear(mod, inp, out):
        counter[0] += 2 * out.numel() * mod.d_in

    def conv(mod, inp, out):
        counter[0] += 2 * out.numel() * (mod.c_in // mod.groups) * mod.kernel ** 2

    def convt(mod, inp, out):
        counter[0] += 2 * inp[0].numel() * mod.c_out * mod.kernel ** 2

    def attention(mod, inp, out):
        n, t, c = inp[0].shape
        counter[0] += 2 * 2 * n * t * t * c  # QK^T and AV

    table = {Linear: linear, Conv2d: conv, ConvTranspose2d: convt, WindowAttention: attention}
    return [m.register_forward_hook(table[type(m)]) for m in model.modules() if type(m) in table]


def count_module_flops(module: nn.Module, *inputs: torch.Tensor) -> int:
    """FLOPs (2 per multiply-add) of conv, linear and attention matmuls in one forward."""
    counter = [0]
    hooks = _flop_hooks(module, counter)
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return counter[0]


def count_flops(model: GCtxUNet, batch: int = 1) -> int:
    """Analytic forward FLOPs at the configured resolution for ``batch`` images."""
    c = model.config
    dtype = next(model.parameters()).dtype
    return count_module_flops(model, torch.zeros(1, c.in_channels, c.img_size, c.img_size, dtype=dtype)) * batch


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GCTXCKPT"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: (1, "<f4"), torch.float64: (2, "<f8"), torch.int64: (3, "<i8"), torch.uint8: (4, "u1")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: ModelConfig
    model: GCtxUNet
    opt_state: OptState | None = None
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    code, np_dt = _DTYPES[t.dtype]
    raw = name.encode()
    arr = np.ascontiguousarray(t.detach().cpu().numpy().astype(np_dt, copy=False))
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, t.dim())
    head += struct.pack(f"<{t.dim()}I", *t.shape)
    return head + arr.tobytes()


def serialize(
    model: GCtxUNet,
    opt_state: OptState | None = None,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> bytes:
    cfg = model.config.to_text().encode()
    meta = json.dumps({"step": step, "rng_state": rng_state, "extra": extra or {},
                       "has_opt": opt_state is not None}, sort_keys=True).encode()
    tensors = [(f"param.{k}", v) for k, v in model.named_parameters()]
    if opt_state is not None:
        tensors += [(f"opt.m.{k}", v) for k, v in sorted(opt_state.exp_avg.items())]
        tensors += [(f"opt.v.{k}", v) for k, v in sorted(opt_state.exp_avg_sq.items())]
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(name, t) for name, t in tensors]
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(path, model: GCtxUNet, opt_state: OptState | None = None, step: int = 0,
                    rng_state: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    data = serialize(model, opt_state, step, rng_state, extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def deserialize(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic or truncated)")
    body, digest = data[:-8], data[-8:]
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated file)")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    pos = len(MAGIC) + 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError("checkpoint truncated")
        out = body[pos: pos + n]
        pos += n
        return out

    config = ModelConfig.from_text(take(struct.unpack("<I", take(4))[0]).decode())
    meta = json.loads(take(struct.unpack("<I", take(4))[0]).decode())
    tensors = {}
    for _ in range(struct.unpack("<I", take(4))[0]):
        name = take(struct.unpack("<H", take(2))[0]).decode()
        code, rank = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype, np_dt = _CODES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(count * np.dtype(np_dt).itemsize), dtype=np_dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(body):
        raise IntegrityError("trailing bytes in checkpoint")

    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    dtype = next(iter(params.values())).dtype if params else torch.float32
    model = GCtxUNet(config).to(dtype)
    missing = set(dict(model.named_parameters())) - set(params)
    if missing:
        raise IntegrityError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.shape != params[name].shape:
                raise IntegrityError(f"parameter {name} has shape {tuple(params[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(params[name])
    opt = None
    if meta.get("has_opt"):
        opt = OptState(
            exp_avg={k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")},
            exp_avg_sq={k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")},
            step=meta["step"],
        )
    return Checkpoint(config, model, opt, meta["step"], meta.get("rng_state"), meta.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    return deserialize(path.read_bytes())


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
