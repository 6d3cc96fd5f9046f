import math

import numpy as np
import pytest
import torch

from gctx_unet import numerics as nx
from gctx_unet import trainer as trainer_mod
from gctx_unet.data import generate_synthetic
from gctx_unet.errors import ConfigError, NumericError
from gctx_unet.model import build, load_checkpoint, small_config
from gctx_unet.optim import OptState, adamw_step
from gctx_unet.trainer import TrainConfig, TrainingDiverged, evaluate, train, train_config_from_mapping


def tiny_config(**kw):
    return small_config(img_size=32, embed_dim=8, window_sizes=(4, 2, 2, 1), **kw)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(6, 32, 3, nx.Rng(1))


def fast_cfg(**kw):
    base = dict(learning_rate=1e-3, weight_decay=0.0, batch_size=4, max_epochs=2, augment=True, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# AdamW -------------------------------------------------------------------------------


def adamw_oracle(w, steps, lr, b1, b2, eps, wd):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd)
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_adamw_matches_scalar_oracle(wd):
    w = torch.tensor([1.0], dtype=torch.float64)
    state = OptState()
    expect = adamw_oracle(1.0, 10, 0.05, 0.9, 0.999, 1e-8, wd)
    for t in range(10):
        adamw_step({"w": w}, state, 0.05, (0.9, 0.999), 1e-8, wd, grads={"w": 2.0 * w.clone()})
        assert abs(w.item() - expect[t]) < 1e-10
    assert state.step == 10


def test_adamw_zero_grad_no_decay_is_noop():
    w = torch.tensor([0.3, -2.0], dtype=torch.float64)
    before = w.clone()
    adamw_step({"w": w}, OptState(), 0.1, grads={"w": torch.zeros(2, dtype=torch.float64)})
    assert torch.equal(w, before)


def test_adamw_first_step_is_minus_lr():
    w = torch.tensor([0.0], dtype=torch.float64)
    adamw_step({"w": w}, OptState(), 1e-3, eps=1e-8, grads={"w": torch.ones(1, dtype=torch.float64)})
    assert abs(w.item() + 1e-3 / (1 + 1e-8)) < 1e-15


def test_adamw_nonfinite_grad_aborts_untouched():
    w = torch.tensor([1.0, 2.0])
    state = OptState()
    with pytest.raises(NumericError):
        adamw_step({"w": w}, state, 0.1, grads={"w": torch.tensor([1.0, float("nan")])})
    assert torch.equal(w, torch.tensor([1.0, 2.0])) and state.step == 0


# config -------------------------------------------------------------------------------


def test_train_config_lists_all_problems():
    cfg = TrainConfig(batch_size=0, patience=0, beta1=1.5, w_dice=0.9)
    assert len(cfg.problems()) == 4
    with pytest.raises(ConfigError):
        cfg.validate()


def test_train_config_from_mapping():
    cfg = train_config_from_mapping({"learning_rate": "0.01", "augment": "false", "batch_size": "3"})
    assert cfg.learning_rate == 0.01 and cfg.augment is False and cfg.batch_size == 3
    with pytest.raises(ConfigError):
        train_config_from_mapping({"lr": "1"})


def test_class_count_mismatch(data):
    with pytest.raises(ConfigError):
        train(build(tiny_config(num_classes=2)), data, fast_cfg())


# training loop -----------------------------------------------------------------------------


def test_same_seed_identical_losses_and_logs(tmp_path, data):
    runs = []
    for name in ("a", "b"):
        res = train(build(tiny_config()), data, fast_cfg(), out_dir=tmp_path / name)
        runs.append(res)
    assert runs[0].step_losses == runs[1].step_losses
    assert (tmp_path / "a" / "train.log").read_bytes() == (tmp_path / "b" / "train.log").read_bytes()


def test_zero_lr_constant_loss(data):
    res = train(build(tiny_config()), data, fast_cfg(learning_rate=0.0, batch_size=6, max_epochs=4, augment=False))
    losses = res.step_losses
    assert len(losses) == 4
    assert max(losses) - min(losses) < 1e-6


def test_resume_matches_uninterrupted(tmp_path, data):
    full = train(build(tiny_config()), data, fast_cfg(max_epochs=3), out_dir=tmp_path / "full")
    part = train(build(tiny_config()), data, fast_cfg(max_steps=3, max_epochs=3), out_dir=tmp_path / "part")
    ck = load_checkpoint(part.final_checkpoint)
    assert ck.step == 3
    rest = train(ck.model, data, fast_cfg(max_epochs=3), out_dir=tmp_path / "part", resume=ck)
    assert part.step_losses + rest.step_losses == full.step_losses
    a, b = load_checkpoint(full.final_checkpoint), load_checkpoint(rest.final_checkpoint)
    for (k, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), k
    # The resumed log continues from the saved step; only the interim report differs.
    full_log = (tmp_path / "full" / "train.log").read_text().splitlines()
    part_log = [r for r in (tmp_path / "part" / "train.log").read_text().splitlines() if '"interim"' not in r]
    assert part_log == full_log


def test_checkpoints_and_log_written(tmp_path, data):
    res = train(build(tiny_config()), data, fast_cfg(), out_dir=tmp_path)
    assert res.best_checkpoint.exists() and res.final_checkpoint.exists()
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert '"baseline"' in lines[0]
    assert sum('"kind": "epoch"' in line for line in lines) == 2
    assert (tmp_path / "train.log.timing").exists()
    assert "wall_time" not in (tmp_path / "train.log").read_text()


def test_non_deterministic_log_has_wall_time(tmp_path, data):
    train(build(tiny_config()), data, fast_cfg(max_epochs=1, deterministic=False), out_dir=tmp_path)
    assert "wall_time" in (tmp_path / "train.log").read_text()
    nx.set_deterministic(True)


def test_baseline_is_untrained_evaluation(data):
    model = build(tiny_config())
    expect = evaluate(model, data).mean_dsc
    res = train(model, data, fast_cfg(max_epochs=1))
    assert res.baseline_dsc == expect


def test_patience_stops(data):
    res = train(build(tiny_config()), data, fast_cfg(learning_rate=0.0, max_epochs=10, patience=2, augment=False))
    assert res.stop_reason == "patience"
    assert len(res.epoch_records) == 3


def test_max_steps_stops(data):
    res = train(build(tiny_config()), data, fast_cfg(max_steps=3, max_epochs=10))
    assert res.step == 3 and res.stop_reason == "max_steps"


def test_divergence_reports_last_good(tmp_path, data, monkeypatch):
    real = trainer_mod.combined_loss
    calls = []

    def flaky(logits, target, weights):
        calls.append(1)
        loss = real(logits, target, weights)
        return loss * float("nan") if len(calls) > 2 else loss

    monkeypatch.setattr(trainer_mod, "combined_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(build(tiny_config()), data, fast_cfg(batch_size=6, max_epochs=5), out_dir=tmp_path)
    assert info.value.last_good == tmp_path / "best.ckpt"
    assert isinstance(info.value, NumericError)


# evaluation ---------------------------------------------------------------------------------


def test_evaluate_does_not_mutate_and_is_repeatable(data):
    model = build(tiny_config())
    before = {k: v.clone() for k, v in model.named_parameters()}
    r1, r2 = evaluate(model, data, with_hd=True), evaluate(model, data, with_hd=True)
    assert r1.to_dict() == r2.to_dict() or np.isnan(r1.mean_hd95)
    assert r1.format() == r2.format()
    for k, v in model.named_parameters():
        assert torch.equal(v, before[k])
    assert model.training


class _Oracle(torch.nn.Module):
    """Stand-in network that emits one-hot logits of stored masks."""

    def __init__(self, dataset):
        super().__init__()
        self.config = tiny_config()
        self.p = torch.nn.Parameter(torch.zeros(1))
        self.masks = torch.stack([torch.from_numpy(s.mask.astype(np.int64)) for s in dataset.samples])
        self.images = torch.stack([torch.from_numpy(s.image) for s in dataset.samples])

    def forward(self, x):
        idx = [int(torch.nonzero((self.images == img).flatten(1).all(1))[0]) for img in x]
        return torch.nn.functional.one_hot(self.masks[idx], 3).permute(0, 3, 1, 2).float()


def test_ground_truth_prediction_scores_perfect(data):
    report = evaluate(_Oracle(data), data, with_hd=True)
    assert report.mean_dsc == 1.0 and report.mean_hd95 == 0.0
