"""GC-ViT building blocks.

All feature maps crossing a block boundary are channel-first ``[B, C, H, W]``.
Windowed token tensors are ``[num_windows * B, w * w, C]`` with windows ordered
image-major then row-major.
"""
from __future__ import annotations

import math
from typing import Callable

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, DimensionError

UPSAMPLERS = ("transposed_se", "transposed", "bilinear_se", "bilinear")


# ---------------------------------------------------------------------------
# parameter containers routed through the numerics wrappers


def _conv_init(weight: torch.Tensor, fan_in: int) -> None:
    std = 1.0 / math.sqrt(max(1, fan_in))
    nn.init.trunc_normal_(weight, std=std, a=-2 * std, b=2 * std)


# Standalone modules draw from torch's global generator; model.build re-initialises
# everything from a seeded Rng so full networks never depend on it.
class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.trunc_normal_(self.weight, std=0.02, a=-0.04, b=0.04)

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        self.weight = nn.Parameter(torch.empty(c_out, c_in // groups, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        _conv_init(self.weight, self.weight[0].numel())

    def forward(self, x):
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 2, kernel: int | None = None, bias: bool = False):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.kernel = kernel or stride
        self.weight = nn.Parameter(torch.empty(c_in, c_out, self.kernel, self.kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        _conv_init(self.weight, c_in * self.kernel ** 2 // stride ** 2)

    def forward(self, x):
        return nx.conv2d_transpose(x, self.weight, self.bias, self.stride)


class LayerNorm(nn.Module):
    """Layer norm over channels; ``channels_first`` handles ``[B, C, H, W]`` maps."""

    def __init__(self, dim: int, eps: float = 1e-5, channels_first: bool = False):
        super().__init__()
        self.dim, self.eps, self.channels_first = dim, eps, channels_first
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        if self.channels_first:
            x = x.permute(0, 2, 3, 1)
            return nx.layer_norm(x, self.weight, self.bias, self.eps).permute(0, 3, 1, 2)
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


class DropPath(nn.Module):
    """Stochastic depth on the residual branch.  Identity when ``p == 0``."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = torch.rand((x.shape[0],) + (1,) * (x.dim() - 1), dtype=x.dtype) < keep
        return x * mask / keep


# ---------------------------------------------------------------------------
# convolutional blocks


class SqueezeExcite(nn.Module):
    """Channel gate: ``x * sigmoid(fc2(gelu(fc1(gap(x)))))``."""

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        if dim >= reduction and dim % reduction:
            raise DimensionError(f"SE channels {dim} not divisible by reduction {reduction}")
        hidden = max(1, dim // reduction)
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.fc1.d_in:
            raise DimensionError(f"SE expects [B,{self.fc1.d_in},H,W], got {tuple(x.shape)}")
        s = nx.global_avg_pool(x)
        gate = nx.sigmoid(self.fc2(nx.gelu(self.fc1(s))))
        return x * gate[:, :, None, None]


class FusedMBConv(nn.Module):
    """Depthwise 3x3 -> GELU -> SE -> pointwise 1x1, plus identity shortcut."""

    def __init__(self, dim: int, se_reduction: int = 4, use_se: bool = True):
        super().__init__()
        self.dw = Conv2d(dim, dim, 3, padding=1, groups=dim, bias=False)
        self.se = SqueezeExcite(dim, se_reduction) if use_se else None
        self.pw = Conv2d(dim, dim, 1, bias=False)

    def forward(self, x):
        h = nx.gelu(self.dw(x))
        if self.se is not None:
            h = self.se(h)
        return nx.check_finite(self.pw(h) + x, "fused_mbconv")


class Downsample(nn.Module):
    """Halve resolution and double channels: FusedMBConv, 3x3/s2 conv, LayerNorm."""

    def __init__(self, dim: int, dim_out: int | None = None, se_reduction: int = 4):
        super().__init__()
        dim_out = dim_out or 2 * dim
        self.mbconv = FusedMBConv(dim, se_reduction)
        self.reduce = Conv2d(dim, dim_out, 3, stride=2, padding=1, bias=False)
        self.norm = LayerNorm(dim_out, channels_first=True)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise DimensionError(f"downsample needs even spatial extents, got {tuple(x.shape[-2:])}")
        return self.norm(self.reduce(self.mbconv(x)))


class Upsample(nn.Module):
    """Double resolution and halve channels.

    ``kind`` selects the upsampling path: ``transposed_se`` (FusedMBConv with SE,
    then a 2x2/s2 transposed conv), ``transposed`` (same without SE),
    ``bilinear_se`` / ``bilinear`` (optional SE, bilinear x2, 1x1 conv).  All
    finish with a LayerNorm.
    """

    def __init__(self, dim: int, kind: str = "transposed_se", se_reduction: int = 4):
        super().__init__()
        if dim % 2:
            raise DimensionError(f"upsample needs an even channel count, got {dim}")
        if kind not in UPSAMPLERS:
            raise ConfigError(f"unknown upsampler {kind!r}; choose from {UPSAMPLERS}")
        self.kind = kind
        if kind.startswith("transposed"):
            self.mbconv = FusedMBConv(dim, se_reduction, use_se=kind == "transposed_se")
            self.expand = ConvTranspose2d(dim, dim // 2, stride=2)
        else:
            self.se = SqueezeExcite(dim, se_reduction) if kind == "bilinear_se" else None
            self.expand = Conv2d(dim, dim // 2, 1, bias=False)
        self.norm = LayerNorm(dim // 2, channels_first=True)

    def forward(self, x):
        if x.shape[1] % 2:
            raise DimensionError(f"upsample needs an even channel count, got {x.shape[1]}")
        if self.kind.startswith("transposed"):
            x = self.expand(self.mbconv(x))
        else:
            if self.se is not None:
                x = self.se(x)
            x = torch.nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.expand(x)
        return self.norm(x)


class PatchEmbed(nn.Module):
    """Stem: 3x3/s2 conv to ``dim``, FusedMBConv, 3x3/s2 conv, LayerNorm (H/4 x W/4)."""

    def __init__(self, in_channels: int, dim: int, se_reduction: int = 4):
        super().__init__()
        self.proj = Conv2d(in_channels, dim, 3, stride=2, padding=1)
        self.mbconv = FusedMBConv(dim, se_reduction)
        self.reduce = Conv2d(dim, dim, 3, stride=2, padding=1, bias=False)
        self.norm = LayerNorm(dim, channels_first=True)

    def forward(self, img):
        if img.shape[-1] % 4 or img.shape[-2] % 4:
            raise DimensionError(f"patch embedding needs extents divisible by 4, got {tuple(img.shape[-2:])}")
        return self.norm(self.reduce(self.mbconv(self.proj(img))))


# ---------------------------------------------------------------------------
# windows and attention


def window_partition(x, w: int):
    """``[B, C, H, W]`` -> ``[B * (H/w) * (W/w), w*w, C]``."""
    b, c, h, wd = x.shape
    if h % w or wd % w:
        raise DimensionError(f"window {w} does not tile a {h}x{wd} map")
    x = x.permute(0, 2, 3, 1).reshape(b, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def window_merge(windows, w: int, h: int, wd: int):
    """Inverse of :func:`window_partition`."""
    n, t, c = windows.shape
    if t != w * w or h % w or wd % w or n % ((h // w) * (wd // w)):
        raise DimensionError(f"cannot merge windows {tuple(windows.shape)} into {h}x{wd} with w={w}")
    b = n // ((h // w) * (wd // w))
    x = windows.reshape(b, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c).permute(0, 3, 1, 2)


class RelPosBias(nn.Module):
    """Learned bias indexed by the (dy, dx) offset between query and key positions."""

    def __init__(self, window: int, heads: int):
        super().__init__()
        self.window, self.heads = window, heads
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.table, std=0.02, a=-0.04, b=0.04)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self):
        t = self.window * self.window
        return self.table[self.index.reshape(-1)].reshape(t, t, self.heads).permute(2, 0, 1)


class WindowAttention(nn.Module):
    """Multi-head attention inside non-overlapping windows.

    ``kind="local"`` projects Q, K, V from the window tokens.  ``kind="global"``
    projects only K, V and takes Q from the stage's shared global query tokens,
    repeated across each image's windows.
    """

    def __init__(self, dim: int, heads: int, window: int, kind: str = "local"):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        if kind not in ("local", "global"):
            raise ConfigError(f"attention kind must be local or global, got {kind!r}")
        self.dim, self.heads, self.window, self.kind = dim, heads, window, kind
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, (3 if kind == "local" else 2) * dim)
        self.proj = Linear(dim, dim)
        self.rel_bias = RelPosBias(window, heads)
        self.attn_hook: Callable | None = None

    def forward(self, windows, q_global=None):
        n, t, c = windows.shape
        if c != self.dim or t != self.window ** 2:
            raise DimensionError(f"attention expects [N,{self.window ** 2},{self.dim}], got {tuple(windows.shape)}")
        parts = self.qkv(windows).reshape(n, t, -1, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if self.kind == "local":
            q, k, v = parts[0], parts[1], parts[2]
        else:
            if q_global is None:
                raise DimensionError("global attention requires global query tokens")
            b = q_global.shape[0]
            if tuple(q_global.shape[1:]) != (self.heads, t, self.head_dim) or n % b:
                raise DimensionError(f"global queries {tuple(q_global.shape)} incompatible with windows {tuple(windows.shape)}")
            q = q_global.repeat_interleave(n // b, dim=0)
            k, v = parts[0], parts[1]
        logits = (q * self.scale) @ k.transpose(-2, -1) + self.rel_bias().unsqueeze(0)
        attn = nx.softmax(logits, axis=-1)
        if self.attn_hook is not None:
            self.attn_hook(attn)
        out = (attn @ v).transpose(1, 2).reshape(n, t, c)
        return self.proj(out)


class GlobalTokenGenerator(nn.Module):
    """Compress a stage input to ``window x window`` query tokens.

    Applies ``log2(side / window)`` rounds of (FusedMBConv, 3x3/s2 conv) with
    the channel count preserved, then splits channels into heads:
    ``[B, heads, window**2, dim // heads]``.
    """

    def __init__(self, dim: int, heads: int, window: int, side: int, se_reduction: int = 4):
        super().__init__()
        ratio = side / window
        steps = round(math.log2(ratio)) if ratio >= 1 else -1
        if side % window or steps < 0 or 2 ** steps * window != side:
            raise ConfigError(f"feature side {side} / window {window} is not a power of two")
        self.dim, self.heads, self.window, self.side = dim, heads, window, side
        self.steps = nn.ModuleList(
            nn.ModuleList([FusedMBConv(dim, se_reduction), Conv2d(dim, dim, 3, stride=2, padding=1, bias=False)])
            for _ in range(steps)
        )

    def forward(self, x):
        b, c, h, w = x.shape
        if c != self.dim or h != self.side or w != self.side:
            raise DimensionError(f"token generator built for [B,{self.dim},{self.side},{self.side}], got {tuple(x.shape)}")
        for mbconv, reduce in self.steps:
            x = reduce(mbconv(x))
        t = self.window * self.window
        return x.permute(0, 2, 3, 1).reshape(b, t, self.heads, c // self.heads).permute(0, 2, 1, 3)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 3.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class GCViTBlock(nn.Module):
    """Pre-norm transformer block over windows: ``x + MSA(LN x)`` then ``x + MLP(LN x)``."""

    def __init__(self, dim: int, heads: int, window: int, kind: str = "local", mlp_ratio: float = 3.0,
                 drop_path: float = 0.0):
        super().__init__()
        self.window, self.kind = window, kind
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, kind)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, q_global=None):
        b, c, h, w = x.shape
        x = x.permute(0, 2, 3, 1)
        shortcut = x
        y = self.norm1(x).permute(0, 3, 1, 2)
        y = window_merge(self.attn(window_partition(y, self.window), q_global), self.window, h, w)
        x = shortcut + self.drop_path(y.permute(0, 2, 3, 1))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x.permute(0, 3, 1, 2)


class GCViTStage(nn.Module):
    """One resolution level: a token generator feeding ``depth`` alternating blocks.

    Even-indexed blocks use local attention, odd-indexed blocks global.
    """

    def __init__(self, dim: int, depth: int, heads: int, window: int, side: int, mlp_ratio: float = 3.0,
                 se_reduction: int = 4, drop_path: float = 0.0):
        super().__init__()
        if side % window:
            raise ConfigError(f"window size {window} does not divide feature side {side}")
        self.dim, self.side = dim, side
        self.token_gen = GlobalTokenGenerator(dim, heads, window, side, se_reduction)
        self.blocks = nn.ModuleList(
            GCViTBlock(dim, heads, window, "local" if i % 2 == 0 else "global", mlp_ratio, drop_path)
            for i in range(depth)
        )

    def forward(self, x):
        q_global = self.token_gen(x)
        for blk in self.blocks:
            x = blk(x, q_global)
        return x
