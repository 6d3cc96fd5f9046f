"""Training loop, evaluation and early stopping."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import numerics as nx
from .data import SegDataset, collate, epoch_plan
from .errors import ConfigError, NumericError
from .model import Checkpoint, GCtxUNet, save_checkpoint
from .objectives import CaseReport, LossWeights, aggregate, combined_loss, evaluate_case
from .optim import OptState, adamw_step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 24
    max_epochs: int = 150
    max_steps: int = 0  # 0 = no step budget
    w_dice: float = 0.7
    w_ce: float = 0.3
    eval_every: int = 1
    patience: int = 10
    seed: int = 0
    shuffle: bool = True
    augment: bool = True
    grad_clip: float = 0.0  # 0 = off
    deterministic: bool = True

    def problems(self) -> list[str]:
        out = []
        if not self.learning_rate >= 0:
            out.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            out.append("betas must lie in [0, 1)")
        if self.eps <= 0:
            out.append("eps must be positive")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            out.append("max_epochs must be >= 1")
        if self.max_steps < 0:
            out.append("max_steps must be >= 0")
        if self.patience < 1:
            out.append("patience must be >= 1")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.grad_clip < 0:
            out.append("grad_clip must be >= 0")
        try:
            LossWeights(self.w_dice, self.w_ce)
        except ConfigError as exc:
            out.append(str(exc))
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dice, self.w_ce)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    step: int = 0
    best_dsc: float = -1.0
    best_checkpoint: Path | None = None
    final_checkpoint: Path | None = None
    stop_reason: str = ""

    @property
    def step_losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r["kind"] == "step"]

    @property
    def epoch_records(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]

    @property
    def baseline_dsc(self) -> float | None:
        return next((r["val_dsc"] for r in self.records if r["kind"] == "baseline"), None)


def clip_grad_norm(params: dict[str, torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return total


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: GCtxUNet, images: torch.Tensor) -> torch.Tensor:
    """Argmax label maps ``[B, H, W]`` without touching training mode permanently."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        return model(images.to(dtype)).argmax(dim=1)
    finally:
        model.train(was_training)


def evaluate(model: GCtxUNet, dataset: SegDataset, batch_size: int = 8, with_hd: bool = False) -> CaseReport:
    """Mean foreground DSC (and HD95) over ``dataset``; classes 1..K-1."""
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model predicts {model.config.num_classes}")
    classes = range(1, dataset.num_classes)
    reports = []
    for batch in epoch_plan(len(dataset), batch_size, shuffle=False, rng=None):
        images, masks = collate(dataset, batch)
        preds = predict(model, images).numpy()
        for (i, _), pred, mask in zip(batch, preds, masks.numpy()):
            reports.append(evaluate_case(pred, mask, classes, dataset[i].spacing, with_hd=with_hd))
    return aggregate(reports)


# ---------------------------------------------------------------------------
# training


class _Logger:
    """Append-only JSON-lines log.  Wall times go to a ``.timing`` sidecar in deterministic mode."""

    def __init__(self, path: Path | None, deterministic: bool):
        self.path = path
        self.timing = path.with_suffix(path.suffix + ".timing") if path and deterministic else None
        self.deterministic = deterministic
        self.t0 = time.perf_counter()

    def write(self, record: dict) -> dict:
        wall = round(time.perf_counter() - self.t0, 3)
        if not self.deterministic:
            record = {**record, "wall_time": wall}
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.timing:
            with self.timing.open("a") as fh:
                fh.write(json.dumps({"step": record.get("step"), "wall_time": wall}) + "\n")
        return record


def train(
    model: GCtxUNet,
    dataset: SegDataset,
    cfg: TrainConfig,
    val_dataset: SegDataset | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Fit ``model`` in place with AdamW on the weighted dice + CE loss.

    Stops at ``max_epochs``, at ``max_steps`` (if set), or when validation
    mean DSC has not improved for ``patience`` evaluations.  With ``out_dir``
    the best and final checkpoints and ``train.log`` are written there.  A run
    resumed from its final checkpoint continues exactly where it stopped.
    """
    cfg.validate()
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model predicts {model.config.num_classes}")
    if cfg.deterministic:
        nx.set_deterministic(True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = _Logger(out / "train.log" if out else None, cfg.deterministic)
    val = val_dataset or dataset
    weights = cfg.loss_weights
    params = model.named_params()
    rng = nx.Rng(cfg.seed)

    state = OptState()
    result = TrainResult()
    bad_evals = 0
    carried: list[float] = []  # losses of a partially finished epoch, restored on resume
    if resume is not None:
        state = resume.opt_state or OptState(step=resume.step)
        result.step = resume.step
        extra = resume.extra
        result.best_dsc = extra.get("best_dsc", -1.0)
        bad_evals = extra.get("bad_evals", 0)
        carried = list(extra.get("epoch_losses", []))
        if out is not None and (out / "best.ckpt").exists():
            result.best_checkpoint = out / "best.ckpt"

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    epoch = result.step // steps_per_epoch
    skip = result.step % steps_per_epoch
    model.train()

    def checkpoint(name: str, partial: list[float] = ()) -> Path | None:
        if out is None:
            return None
        return save_checkpoint(out / name, model, state, result.step, rng.get_state(),
                               {"best_dsc": result.best_dsc, "bad_evals": bad_evals, "epoch_losses": list(partial),
                                "train_config": asdict(cfg)})

    if resume is None:
        # Untrained reference point: where validation DSC starts before any update.
        result.records.append(log.write({"kind": "baseline", "epoch": 0, "step": 0,
                                         "val_dsc": evaluate(model, val).mean_dsc}))

    while epoch < cfg.max_epochs:
        plan = epoch_plan(len(dataset), cfg.batch_size, cfg.shuffle, rng.child("epoch", epoch), cfg.augment)
        losses, carried = carried, []
        for batch in plan[skip:]:
            if cfg.max_steps and result.step >= cfg.max_steps:
                break
            images, masks = collate(dataset, batch)
            torch.manual_seed(cfg.seed * 1_000_003 + result.step)
            for p in params.values():
                p.grad = None
            logits = model(images.to(next(iter(params.values())).dtype))
            loss = combined_loss(logits, masks, weights)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDiverged(f"loss became {loss_value} at step {result.step}", result.best_checkpoint)
            nx.backward(loss)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            adamw_step(params, state, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
            result.step += 1
            losses.append(loss_value)
            result.records.append(log.write({"kind": "step", "epoch": epoch, "step": result.step,
                                             "loss": loss_value, "lr": cfg.learning_rate}))
        skip = 0
        budget_hit = bool(cfg.max_steps) and result.step >= cfg.max_steps
        epoch_done = not budget_hit or result.step % steps_per_epoch == 0
        if epoch_done:
            epoch += 1
        last = epoch >= cfg.max_epochs or budget_hit
        if losses and not epoch_done:
            # Mid-epoch budget stop: report, but leave best/patience bookkeeping to
            # whole epochs so a resumed run tracks an uninterrupted one exactly.
            result.records.append(log.write({"kind": "interim", "epoch": epoch, "step": result.step,
                                             "loss": float(np.mean(losses)),
                                             "val_dsc": evaluate(model, val).mean_dsc, "lr": cfg.learning_rate}))
        elif losses and (epoch % cfg.eval_every == 0 or last):
            report = evaluate(model, val)
            val_dsc = report.mean_dsc
            improved = val_dsc > result.best_dsc
            if improved:
                result.best_dsc = val_dsc
                bad_evals = 0
                result.best_checkpoint = checkpoint("best.ckpt")
            else:
                bad_evals += 1
            result.records.append(log.write({"kind": "epoch", "epoch": epoch - 1,
                                             "step": result.step, "loss": float(np.mean(losses)),
                                             "val_dsc": val_dsc, "lr": cfg.learning_rate}))
            if bad_evals >= cfg.patience:
                result.stop_reason = "patience"
                break
        if budget_hit:
            result.stop_reason = "max_steps"
            break
    else:
        result.stop_reason = "max_epochs"
    partial = losses if result.step % steps_per_epoch else []
    result.final_checkpoint = checkpoint("final.ckpt", partial)
    return result


def fit_summary(result: TrainResult) -> dict[str, Any]:
    return {"steps": result.step, "best_dsc": result.best_dsc, "stop_reason": result.stop_reason,
            "final_loss": result.step_losses[-1] if result.step_losses else None}


def train_config_from_mapping(values: dict[str, Any]) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown train config key {key!r}")
        default = TrainConfig.__dataclass_fields__[key].default
        if isinstance(raw, str):
            try:
                if isinstance(default, bool):
                    raw = raw.lower() in {"1", "true", "yes", "on"}
                elif isinstance(default, int):
                    raw = int(raw)
                elif isinstance(default, float):
                    raw = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        kwargs[key] = raw
    return TrainConfig(**kwargs)
