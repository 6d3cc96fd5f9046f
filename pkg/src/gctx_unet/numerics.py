"""Tensor substrate: differentiable primitives, backward, gradient checking, RNG.

Tensors are ``torch.Tensor`` and the gradient tape is torch's autograd graph.
Everything the network needs goes through the thin wrappers below so shape
contracts and the NaN/Inf policy are enforced in one place.  The
finite-difference harness in :func:`gradcheck` is independent of autograd and
is what the test-suite uses to audit every adjoint.
"""
from __future__ import annotations

import contextlib
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, UsageError

Tensor = torch.Tensor

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

# Finite-value checks at op boundaries.  Disable with GCTX_CHECK_FINITE=0.
CHECK_FINITE = os.environ.get("GCTX_CHECK_FINITE", "1") != "0"

_corrupted: set[str] = set()


# ---------------------------------------------------------------------------
# modes


def set_deterministic(enabled: bool = True) -> None:
    """Fixed reduction order: single thread plus torch deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def deterministic_from_env(default: bool = True) -> bool:
    value = os.environ.get("GCTX_DETERMINISTIC")
    if value is None:
        return default
    return value.strip().lower() not in {"0", "false", "no", "off"}


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (64-bit for gradchecks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


@contextlib.contextmanager
def corrupt_adjoint(*names: str) -> Iterator[None]:
    """Negative control: make the named primitives use a wrong backward rule."""
    unknown = set(names) - set(_CORRUPTIBLE)
    if unknown:
        raise UsageError(f"cannot corrupt unknown primitives: {sorted(unknown)}")
    _corrupted.update(names)
    try:
        yield
    finally:
        _corrupted.difference_update(names)


def check_finite(t: Tensor, where: str) -> Tensor:
    if CHECK_FINITE and t.is_floating_point() and not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values produced by {where}")
    return t


def tensor(data, dtype: torch.dtype | None = None, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype or torch.get_default_dtype()).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------------------
# convolution / affine


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Zero-padded 2-D cross-correlation.  ``groups == C == O`` is depthwise."""
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if c % groups or o % groups:
        raise DimensionError(f"channels {c} -> {o} not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {tuple(bias.shape)} != ({o},)")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)
    return check_finite(out, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution whose output extents are exactly ``stride`` times the input.

    ``weight`` has layout ``[C_in, C_out, k, k]``; padding and output padding are
    derived from ``k`` so that the spatial scale is exact.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError(f"conv2d_transpose expects 4-D tensors, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"input channels {x.shape[1]} != weight in-channels {weight.shape[0]}")
    k = weight.shape[-1]
    pad = max(0, math.ceil((k - stride) / 2))
    out_pad = stride + 2 * pad - k
    if not 0 <= out_pad < stride and not (stride == 1 and out_pad == 0):
        raise DimensionError(f"kernel {k} cannot give an exact x{stride} upscale")
    out = F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad, output_padding=out_pad)
    return check_finite(out, "conv2d_transpose")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: trailing dim {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return check_finite(F.linear(x, weight, bias), "linear")


# ---------------------------------------------------------------------------
# normalisation / activations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    return check_finite(F.layer_norm(x, (d,), gamma, beta, eps), "layer_norm")


class _CorruptGelu(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return F.gelu(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        cdf = 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))
        pdf = torch.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return grad * (cdf + x * pdf) * 2.0  # deliberately wrong


class _CorruptSigmoid(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        y = torch.sigmoid(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return grad * y  # missing the (1 - y) factor


_CORRUPTIBLE = {"gelu": _CorruptGelu, "sigmoid": _CorruptSigmoid}


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    if "gelu" in _corrupted:
        return _CorruptGelu.apply(x)
    return F.gelu(x)


def sigmoid(x: Tensor) -> Tensor:
    if "sigmoid" in _corrupted:
        return _CorruptSigmoid.apply(x)
    return torch.sigmoid(x)


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return F.leaky_relu(x, slope)


def log(x: Tensor) -> Tensor:
    return check_finite(torch.log(x), "log")


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return a * b


def scale(a: Tensor, s: float) -> Tensor:
    return a * s


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims of ``[B, C, H, W]``; returns ``[B, C]``."""
    if x.dim() != 4:
        raise DimensionError(f"global_avg_pool expects [B,C,H,W], got {tuple(x.shape)}")
    return x.mean(dim=(2, 3))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.reshape(tuple(shape))
    except RuntimeError as exc:
        raise DimensionError(f"cannot reshape {tuple(x.shape)} to {tuple(shape)}") from exc


def permute(x: Tensor, dims: Sequence[int]) -> Tensor:
    if sorted(dims) != list(range(x.dim())):
        raise DimensionError(f"{list(dims)} is not a permutation of {x.dim()} axes")
    return x.permute(*dims)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    ref = xs[0]
    for t in xs[1:]:
        if t.dim() != ref.dim() or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.dim()
        ):
            raise DimensionError(f"concat: shapes {tuple(ref.shape)} and {tuple(t.shape)} differ off axis {axis}")
    return torch.cat(list(xs), dim=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    return torch.split(x, list(sizes), dim=axis)


def pad(x: Tensor, widths: Sequence[int]) -> Tensor:
    """Zero padding; ``widths`` follows the (last dim first) torch convention."""
    return F.pad(x, tuple(widths))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    return x.sum() if axis is None else x.sum(dim=axis)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def reduce_max(x: Tensor, axis: int | None = None) -> Tensor:
    return x.max() if axis is None else x.amax(dim=axis)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"axis {axis} out of range for rank {x.dim()}")


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from exc


# ---------------------------------------------------------------------------
# backward + gradient checking


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("loss is not attached to a gradient tape")
    check_finite(loss.detach(), "loss")
    loss.reshape(()).backward()


@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    checked: int


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def failures(self) -> list[GradcheckEntry]:
        return [e for e in self.entries if not e.max_rel_error < self.tolerance]

    def lines(self, label: str = "") -> list[str]:
        prefix = f"{label}." if label else ""
        return [
            f"{prefix}{e.name}\t{e.max_rel_error:.3e}\t{e.checked}\t{'PASS' if e.max_rel_error < self.tolerance else 'FAIL'}"
            for e in self.entries
        ]


def gradcheck(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients against central finite differences.

    ``fn`` is re-evaluated with each entry of each tensor in ``params`` nudged
    by ``±eps`` in place, so it must read the tensors rather than copies.  A
    non-scalar output is contracted with a fixed random tensor first.  The
    error for an entry is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    the larger of ``1e-3 * max|n|`` over the tensor and the resolution limit
    of central differences, ``1e4 * machine_eps * max(|f|, 1) / eps``; the
    report keeps the max per tensor.  ``max_entries`` caps how many
    (randomly chosen) entries are perturbed per tensor.
    """
    rng = np.random.default_rng(seed)
    projection: list[Tensor] = []

    def scalar() -> Tensor:
        out = fn()
        if out.numel() == 1:
            return out.reshape(())
        if not projection:
            w = rng.standard_normal(tuple(out.shape))
            projection.append(torch.as_tensor(w, dtype=out.dtype))
        return (out * projection[0]).sum()

    leaves = dict(params)
    for t in leaves.values():
        t.grad = None
        t.requires_grad_(True)
    loss = scalar()
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    resolution = 1e4 * torch.finfo(loss.dtype).eps * max(abs(loss.item()), 1.0) / eps

    report = GradcheckReport(tolerance=tol)
    with torch.no_grad():
        for (name, t), g in zip(leaves.items(), grads):
            analytic = torch.zeros_like(t) if g is None else g.detach()
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_entries is None or n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar().item()
                flat[i] = orig - eps
                fm = scalar().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[torch.as_tensor(idx)].double().numpy()
            floor = max(1e-3 * float(np.abs(numeric).max(initial=0.0)), resolution)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            err = float(np.max(np.abs(a - numeric) / denom)) if len(idx) else 0.0
            report.entries.append(GradcheckEntry(name, err, len(idx)))
    return report


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded PCG64 stream with deterministic named children.

    ``child("init", 3)`` always yields the same stream for the same parent seed,
    independent of how many draws the parent has made.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *parts: int | str) -> "Rng":
        key = tuple(p if isinstance(p, int) else zlib.crc32(p.encode()) for p in parts)
        return Rng(self.seed, self.key + key)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws resampled until all lie within ``±bound·std``."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: Mapping) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
