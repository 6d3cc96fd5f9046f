"""Finite-difference gradient audits at three granularities: ops, block, model."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .model import ModelConfig, build, small_config
from .nnblocks import (
    Downsample,
    FusedMBConv,
    GCViTBlock,
    GlobalTokenGenerator,
    PatchEmbed,
    SqueezeExcite,
    Upsample,
)
from .objectives import LossWeights, ce_loss, combined_loss, dice_loss

SCALES = ("ops", "block", "model")
TOLERANCE = 1e-3
STEP = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[], torch.Tensor], dict[str, torch.Tensor]]]


def _t(rng: np.random.Generator, *shape, low=None, high=None) -> torch.Tensor:
    if low is not None:
        return torch.from_numpy(rng.uniform(low, high, shape))
    return torch.from_numpy(rng.standard_normal(shape))


def _away_from_zero(rng, *shape) -> torch.Tensor:
    x = rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
    return torch.from_numpy(x)


def _op_cases() -> dict[str, Case]:
    def conv(r):
        x, w, b = _t(r, 2, 3, 6, 6), _t(r, 4, 3, 3, 3), _t(r, 4)
        return (lambda: nx.conv2d(x, w, b, stride=2, padding=1)), {"x": x, "w": w, "b": b}

    def dwconv(r):
        x, w = _t(r, 1, 3, 5, 5), _t(r, 3, 1, 3, 3)
        return (lambda: nx.conv2d(x, w, None, padding=1, groups=3)), {"x": x, "w": w}

    def convt(r):
        x, w = _t(r, 1, 4, 3, 3), _t(r, 4, 2, 2, 2)
        return (lambda: nx.conv2d_transpose(x, w, stride=2)), {"x": x, "w": w}

    def lin(r):
        x, w, b = _t(r, 3, 5), _t(r, 4, 5), _t(r, 4)
        return (lambda: nx.linear(x, w, b)), {"x": x, "w": w, "b": b}

    def lnorm(r):
        x, g, b = _t(r, 3, 8), _t(r, 8), _t(r, 8)
        return (lambda: nx.layer_norm(x, g, b)), {"x": x, "gamma": g, "beta": b}

    def unary(fn, positive=False, kink=False):
        def case(r):
            if positive:
                x = _t(r, 4, 5, low=0.2, high=3.0)
            elif kink:
                x = _away_from_zero(r, 4, 5)
            else:
                x = _t(r, 4, 5)
            return (lambda: fn(x)), {"x": x}
        return case

    def binary(fn):
        def case(r):
            a, b = _t(r, 3, 4), _t(r, 1, 4)
            return (lambda: fn(a, b)), {"a": a, "b": b}
        return case

    def shape_op(fn, *shape):
        def case(r):
            x = _t(r, *shape)
            return (lambda: fn(x)), {"x": x}
        return case

    def cat(r):
        a, b = _t(r, 1, 2, 3, 3), _t(r, 1, 3, 3, 3)
        return (lambda: nx.concat([a, b], axis=1)), {"a": a, "b": b}

    def rmax(r):
        x = torch.from_numpy(r.permutation(20).reshape(4, 5) * 0.37 + r.uniform(0, 0.1, (4, 5)))
        return (lambda: nx.reduce_max(x, axis=1)), {"x": x}

    return {
        "conv2d": conv,
        "conv2d_depthwise": dwconv,
        "conv2d_transpose": convt,
        "linear": lin,
        "softmax": unary(lambda x: nx.softmax(x, axis=-1)),
        "log_softmax": unary(lambda x: nx.log_softmax(x, axis=0)),
        "layer_norm": lnorm,
        "gelu": unary(nx.gelu),
        "sigmoid": unary(nx.sigmoid),
        "relu": unary(nx.relu, kink=True),
        "leaky_relu": unary(nx.leaky_relu, kink=True),
        "log": unary(nx.log, positive=True),
        "add": binary(nx.add),
        "mul": binary(nx.mul),
        "scale": unary(lambda x: nx.scale(x, -1.7)),
        "global_avg_pool": shape_op(nx.global_avg_pool, 2, 3, 4, 4),
        "reshape": shape_op(lambda x: nx.reshape(x, (5, 4)), 4, 5),
        "permute": shape_op(lambda x: nx.permute(x, (2, 0, 1)), 2, 3, 4),
        "concat": cat,
        "split": shape_op(lambda x: nx.split(x, (2, 3), axis=1)[1] * 2.0 + 0.0, 4, 5),
        "pad": shape_op(lambda x: nx.pad(x, (1, 2, 0, 1)), 1, 2, 3, 3),
        "reduce_sum": shape_op(lambda x: nx.reduce_sum(x, axis=0), 4, 5),
        "reduce_mean": shape_op(lambda x: nx.reduce_mean(x, axis=1), 4, 5),
        "reduce_max": rmax,
    }


def _module_case(make: Callable[[], torch.nn.Module], *inputs: tuple[int, ...], extra=None) -> Case:
    def case(r):
        torch.manual_seed(int(r.integers(1 << 31)))
        mod = make().double()
        with torch.no_grad():
            for p in mod.parameters():
                p.copy_(torch.from_numpy(r.standard_normal(tuple(p.shape)) * 0.5))
        xs = [_t(r, *shape) for shape in inputs]
        args = list(xs) + ([extra(r)] if extra else [])
        params = {f"input{i}": x for i, x in enumerate(xs)}
        params.update({f"param.{k}": v for k, v in mod.named_parameters()})
        return (lambda: mod(*args)), params
    return case


def _loss_case(fn) -> Case:
    def case(r):
        logits = _t(r, 2, 3, 4, 4)
        target = torch.from_numpy(r.integers(0, 3, (2, 4, 4)))
        return (lambda: fn(logits, target)), {"logits": logits}
    return case


def _block_cases() -> dict[str, Case]:
    def q_global(r):
        return _t(r, 1, 2, 4, 4)

    return {
        "se_block": _module_case(lambda: SqueezeExcite(8, 4), (1, 8, 3, 3)),
        "fused_mbconv": _module_case(lambda: FusedMBConv(8), (1, 8, 4, 4)),
        "downsample": _module_case(lambda: Downsample(4), (1, 4, 4, 4)),
        "upsample": _module_case(lambda: Upsample(8), (1, 8, 2, 2)),
        "patch_embed": _module_case(lambda: PatchEmbed(3, 4), (1, 3, 8, 8)),
        "token_generator": _module_case(lambda: GlobalTokenGenerator(8, 2, 2, 4), (1, 8, 4, 4)),
        "gcvit_block_local": _module_case(lambda: GCViTBlock(8, 2, 2, "local"), (1, 8, 4, 4)),
        "gcvit_block_global": _module_case(lambda: GCViTBlock(8, 2, 2, "global"), (1, 8, 4, 4), extra=q_global),
        "dice_loss": _loss_case(dice_loss),
        "ce_loss": _loss_case(ce_loss),
        "combined_loss": _loss_case(lambda x, t: combined_loss(x, t, LossWeights(0.7, 0.3))),
    }


def gradcheck_model_config() -> ModelConfig:
    """The test-scale network itself: 64x64 input, width 16, three classes."""
    return small_config()


def model_case(max_entries: int = 3) -> tuple[Callable[[], torch.Tensor], dict[str, torch.Tensor], int]:
    cfg = gradcheck_model_config()
    with nx.precision(torch.float64):
        model = build(cfg, nx.Rng(9), dtype=torch.float64)
    r = np.random.default_rng(9)
    # Re-randomise at unit-ish scale so every branch carries signal.
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.from_numpy(r.standard_normal(tuple(p.shape)) * 0.3))
    x = torch.from_numpy(r.uniform(0.0, 1.0, (1, 3, cfg.img_size, cfg.img_size)))
    target = torch.from_numpy(r.integers(0, cfg.num_classes, (1, cfg.img_size, cfg.img_size)))
    params = {k: v for k, v in model.named_parameters()}
    return (lambda: combined_loss(model(x), target)), params, max_entries


def run_scale(scale: str, seeds=(9, 10, 11), corrupt: tuple[str, ...] = ()) -> dict[str, nx.GradcheckReport]:
    """Run one granularity in 64-bit; returns a report per named case (and seed)."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    reports = {}
    with nx.precision(torch.float64), nx.corrupt_adjoint(*corrupt):
        if scale == "model":
            fn, params, k = model_case()
            reports["model"] = nx.gradcheck(fn, params, STEP, TOLERANCE, max_entries=k, seed=9)
            return reports
        cases = _op_cases() if scale == "ops" else _block_cases()
        for name, case in cases.items():
            for seed in seeds:
                fn, params = case(np.random.default_rng(seed))
                key = name if len(seeds) == 1 else f"{name}[seed={seed}]"
                reports[key] = nx.gradcheck(fn, params, STEP, TOLERANCE, seed=seed)
    return reports


def format_reports(reports: dict[str, nx.GradcheckReport]) -> str:
    lines = ["case\ttensor\tmax_rel_err\tchecked\tstatus"]
    for name, rep in reports.items():
        lines += [f"{name}\t{line}" for line in rep.lines()]
    failed = [n for n, r in reports.items() if not r.passed]
    lines.append(f"RESULT\t{'FAIL ' + ','.join(failed) if failed else 'PASS'}")
    return "\n".join(lines) + "\n"
