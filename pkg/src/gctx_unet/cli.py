"""``gctx-unet`` command line: gen, convert, resize, train, eval, predict, profile, gradcheck.

Exit codes: 0 success, 1 validation, 2 numeric failure, 3 IO.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .data import (
    SegDataset,
    SegSample,
    generate_synthetic,
    image_from_file,
    load_dataset,
    read_tensor,
    resize_image,
    resize_mask,
    write_dataset,
    write_tensor,
)
from .errors import ConfigError, DimensionError, GCtxError, NumericError, UsageError
from .gradchecks import SCALES, format_reports, run_scale
from .model import (
    REFERENCE_FLOPS,
    REFERENCE_PARAMS,
    REFERENCE_SIZE_MB,
    ModelConfig,
    build,
    count_flops,
    count_params,
    load_checkpoint,
    serialize,
)
from .trainer import TrainConfig, evaluate, fit_summary, predict, train, train_config_from_mapping

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# One color per class index, background first; 9 entries cover the abdominal organ set.
PALETTE = np.array([
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
], dtype=np.uint8)

PROFILE_BATCH = 10


# ---------------------------------------------------------------------------
# run configuration

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_PATH_KEYS = {"data", "val_data", "out", "resume"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    val_data: str | None = None
    out: str | None = None
    resume: str | None = None

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        """Unknown keys and invalid values are all reported in a single error."""
        unknown = sorted(set(values) - _MODEL_KEYS - _TRAIN_KEYS - _PATH_KEYS)
        problems = [f"unknown config key {k!r}" for k in unknown]
        model_vals = {k: v for k, v in values.items() if k in _MODEL_KEYS}
        train_vals = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
        model = train_cfg = None
        try:
            model = ModelConfig.from_mapping(model_vals)
            problems += model.problems()
        except ConfigError as exc:
            problems.append(str(exc))
        try:
            train_cfg = train_config_from_mapping(train_vals)
            problems += train_cfg.problems()
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        paths = {k: values[k] for k in _PATH_KEYS if k in values}
        return cls(model, train_cfg, **paths)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    bad = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            bad.append(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            continue
        values[key.strip()] = value.strip()
    if bad:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(bad))
    return values


def load_run_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    values: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update(parse_config_text("\n".join(overrides), "--set"))
    return RunConfig.from_mapping(values)


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend palette colors over a [C,H,W] image in [0,1]; returns [H,W,3] uint8."""
    base = np.clip(image[:3] if image.shape[0] >= 3 else np.repeat(image[:1], 3, 0), 0.0, 1.0)
    rgb = (base.transpose(1, 2, 0) * 255.0).astype(np.float64)
    colors = PALETTE[mask % len(PALETTE)].astype(np.float64)
    fg = (mask > 0)[..., None]
    return np.where(fg, (1 - alpha) * rgb + alpha * colors, rgb).round().astype(np.uint8)


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def _apply_determinism(flag: bool) -> bool:
    enabled = nx.deterministic_from_env(flag)
    nx.set_deterministic(enabled)
    return enabled


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = _out_dir(args.out)
    dataset = generate_synthetic(args.n, args.size, args.classes, nx.Rng(args.seed), split=args.split)
    try:
        manifest = write_dataset(dataset, out)
    except OSError as exc:
        raise OSError(f"cannot write dataset under {out}: {exc.strerror or exc}") from exc
    print(f"wrote {len(dataset)} samples to {manifest}")
    return EXIT_OK


def cmd_convert(args) -> int:
    """Pair images and masks by file stem and write them as a dataset."""
    img_dir, mask_dir = Path(args.images), Path(args.masks)
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory not found: {d}")
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.is_file()}
    samples = []
    for p in sorted(img_dir.iterdir()):
        if not p.is_file():
            continue
        if p.stem not in masks:
            raise FileNotFoundError(f"no mask for image {p.name} in {mask_dir}")
        image = resize_image(image_from_file(p), args.size)
        mask = _read_mask(masks[p.stem])
        if mask.size and int(mask.max()) >= args.classes:
            raise DimensionError(f"{masks[p.stem]}: label {int(mask.max())} >= classes {args.classes}")
        samples.append(SegSample(image, resize_mask(mask, args.size), p.stem))
    if not samples:
        raise UsageError(f"no images found in {img_dir}")
    dataset = SegDataset(samples, args.classes, args.size, args.split)
    manifest = write_dataset(dataset, _out_dir(args.out))
    print(f"wrote {len(dataset)} samples to {manifest}")
    return EXIT_OK


def _read_mask(path: Path) -> np.ndarray:
    if path.suffix == ".nseg":
        mask = read_tensor(path)
    elif path.suffix == ".npy":
        mask = np.load(path)
    else:
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise UsageError("install Pillow to convert common image formats") from exc
        mask = np.asarray(Image.open(path).convert("L"))
    if mask.ndim != 2:
        raise DimensionError(f"{path}: mask must be 2-D, got shape {mask.shape}")
    return mask.astype(np.uint8)


def cmd_resize(args) -> int:
    out = _out_dir(args.out)
    image = resize_image(image_from_file(args.image), args.size)
    target = out / (Path(args.image).stem + ".nseg")
    write_tensor(target, image)
    print(f"wrote {target} ({image.shape[0]}x{args.size}x{args.size})")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag in ("data", "out", "resume"):
        if getattr(args, flag):
            overrides.append(f"{flag}={getattr(args, flag)}")
    run = load_run_config(args.config, overrides)
    data = _require(run.data, "--data")
    out = _out_dir(_require(run.out, "--out"))
    run.train.deterministic = _apply_determinism(run.train.deterministic)
    dataset = load_dataset(data)
    val = load_dataset(run.val_data) if run.val_data else None

    resume = None
    if run.resume:
        resume = load_checkpoint(run.resume)
        if resume.config != run.model:
            raise ConfigError("resume checkpoint was built with a different model configuration")
        model = resume.model
    else:
        model = build(run.model, nx.Rng(run.model.seed))
    _write_text(out / "run_config.txt", _run_config_text(run))
    result = train(model, dataset, run.train, val_dataset=val, out_dir=out, resume=resume)
    summary = fit_summary(result)
    summary["baseline_dsc"] = result.baseline_dsc
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_config_text(run: RunConfig) -> str:
    lines = [run.model.to_text().rstrip("\n")]
    lines += [f"{k}={v}" for k, v in asdict(run.train).items() if k != "seed"]
    lines += [f"{k}={getattr(run, k)}" for k in sorted(_PATH_KEYS) if getattr(run, k)]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    _apply_determinism(True)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if dataset.num_classes != ckpt.config.num_classes:
        raise ConfigError(f"checkpoint predicts {ckpt.config.num_classes} classes, "
                          f"dataset {args.data} has {dataset.num_classes}")
    if dataset.size != ckpt.config.img_size:
        raise ConfigError(f"checkpoint expects {ckpt.config.img_size}px inputs, dataset has {dataset.size}px")
    report = evaluate(ckpt.model, dataset, with_hd=not args.no_hd)
    table = report.format(with_hd=not args.no_hd)
    out = _out_dir(args.out)
    _write_text(out / "metrics.txt", table)
    payload = {**report.to_dict(), "samples": len(dataset), "spacing": list(dataset.spacing)}
    _write_text(out / "metrics.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    _apply_determinism(True)
    ckpt = load_checkpoint(args.checkpoint)
    image = image_from_file(args.image)
    size, chans = ckpt.config.img_size, ckpt.config.in_channels
    if image.shape[1:] != (size, size):
        raise DimensionError(
            f"image {args.image} is {image.shape[1]}x{image.shape[2]} but the model expects {size}x{size}; "
            f"resize it first with: gctx-unet resize --image {args.image} --size {size} --out DIR")
    if image.shape[0] != chans:
        raise DimensionError(f"image has {image.shape[0]} channels, model expects {chans}")
    mask = predict(ckpt.model, torch.from_numpy(image)[None])[0].numpy().astype(np.uint8)
    out = _out_dir(args.out)
    stem = Path(args.image).stem
    write_tensor(out / f"{stem}.mask.nseg", mask)
    written = [out / f"{stem}.mask.nseg"]
    if args.overlay:
        write_ppm(out / f"{stem}.overlay.ppm", overlay(image, mask))
        written.append(out / f"{stem}.overlay.ppm")
    print("\n".join(f"wrote {p}" for p in written))
    return EXIT_OK


def profile_rows(config: ModelConfig) -> list[tuple[str, float, float | None, str]]:
    """``(quantity, value, reference or None, unit)`` for a freshly built model."""
    model = build(config)
    params = count_params(model)
    flops = count_flops(model, 1)
    size_mb = len(serialize(model)) / 1e6
    is_default = config == ModelConfig()
    ref = (lambda v: v) if is_default else (lambda v: None)
    return [
        ("params", params / 1e6, ref(REFERENCE_PARAMS / 1e6), "M"),
        ("flops_per_forward", flops / 1e9, None, "G"),
        (f"flops_per_batch{PROFILE_BATCH}", flops * PROFILE_BATCH / 1e9, ref(REFERENCE_FLOPS / 1e9), "G"),
        # Same work counted as multiply-adds, the other common convention.
        (f"macs_per_batch{PROFILE_BATCH}", flops * PROFILE_BATCH / 2e9, ref(REFERENCE_FLOPS / 1e9), "G"),
        ("checkpoint_size", size_mb, ref(REFERENCE_SIZE_MB), "MB"),
    ]


def format_profile(rows) -> str:
    lines = [f"{'quantity':<20}{'value':>12}{'reference':>12}{'delta':>10}"]
    for name, value, ref, unit in rows:
        if ref is None:
            lines.append(f"{name:<20}{value:>11.3f}{unit[0]}".rstrip())
        else:
            delta = 100.0 * (value - ref) / ref
            lines.append(f"{name:<20}{value:>11.3f}{unit[0]}{ref:>11.3f}{unit[0]}{delta:>+9.1f}%")
    return "\n".join(lines) + "\n"


def cmd_profile(args) -> int:
    run = load_run_config(args.config, args.set or [])
    text = format_profile(profile_rows(run.model))
    if args.out:
        _write_text(_out_dir(args.out) / "profile.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_scale(args.scale, corrupt=tuple(args.corrupt or ()))
    text = format_reports(reports)
    if args.out:
        _write_text(_out_dir(args.out) / f"gradcheck_{args.scale}.txt", text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gctx-unet", description="GCtx-UNet segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("convert", help="pack image/mask folders into a dataset")
    c.add_argument("--images", required=True)
    c.add_argument("--masks", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--classes", type=int, required=True)
    c.add_argument("--size", type=int, required=True)
    c.add_argument("--split", default="train")
    c.set_defaults(func=cmd_convert)

    r = sub.add_parser("resize", help="resize one image to the model input size")
    r.add_argument("--image", required=True)
    r.add_argument("--size", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_resize)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--resume")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-hd", action="store_true", help="skip HD95")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict a label mask for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--overlay", action="store_true", help="also write a color overlay (.ppm)")
    pr.set_defaults(func=cmd_predict)

    f = sub.add_parser("profile", help="parameter, FLOP and size accounting")
    f.add_argument("--config")
    f.add_argument("--set", action="append", metavar="KEY=VALUE")
    f.add_argument("--out")
    f.set_defaults(func=cmd_profile)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--scale", choices=SCALES, required=True)
    gc.add_argument("--corrupt", action="append", choices=("gelu", "sigmoid"),
                    help="debug: swap in a wrong backward rule for this primitive")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ConfigError, DimensionError, UsageError, GCtxError, ValueError)):
        return EXIT_VALIDATION
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (GCtxError, OSError, ValueError) as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
