"""Training losses and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import numerics as nx
from .errors import ConfigError, DimensionError

UNDEFINED = float("nan")


def is_undefined(value: float) -> bool:
    return isinstance(value, float) and math.isnan(value)


@dataclass(frozen=True)
class LossWeights:
    dice: float = 0.7
    ce: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0 and 0.0 <= self.ce <= 1.0) or abs(self.dice + self.ce - 1.0) > 1e-9:
            raise ConfigError(f"loss weights must lie in [0,1] and sum to 1, got dice={self.dice}, ce={self.ce}")


def _check_target(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.dim() != 4 or target.dim() != 3 or logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise DimensionError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not align")
    k = logits.shape[1]
    if target.numel() and (int(target.max()) >= k or int(target.min()) < 0):
        raise DimensionError(f"target labels must lie in [0, {k}), got range [{int(target.min())}, {int(target.max())}]")


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft dice: ``1 - mean_k (2 sum p t + s) / (sum p + sum t + s)`` over the whole batch."""
    _check_target(logits, target)
    k = logits.shape[1]
    p = nx.softmax(logits, axis=1)
    t = torch.nn.functional.one_hot(target.long(), k).permute(0, 3, 1, 2).to(p.dtype)
    dims = (0, 2, 3)
    inter = (p * t).sum(dims)
    score = (2.0 * inter + smooth) / (p.sum(dims) + t.sum(dims) + smooth)
    return 1.0 - score.mean()


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise negative log-likelihood of the target class."""
    _check_target(logits, target)
    logp = nx.log_softmax(logits, axis=1)
    return -logp.gather(1, target.long().unsqueeze(1)).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    loss = None
    if weights.dice:
        loss = weights.dice * dice_loss(logits, target)
    if weights.ce:
        c = weights.ce * ce_loss(logits, target)
        loss = c if loss is None else loss + c
    return nx.check_finite(loss, "combined_loss")


# ---------------------------------------------------------------------------
# metrics on hard label maps


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def dsc(pred, target, k: int) -> float:
    """``2|P ∩ T| / (|P| + |T|)``; 1.0 when both sets are empty."""
    pred, target = _check_pair(pred, target)
    p, t = pred == k, target == k
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Set pixels with at least one face-neighbour outside the set (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _pair_distance(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    return np.sqrt((((a - b) * spacing) ** 2).sum(axis=-1))


def directed_surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance from each surface point of ``a`` to the nearest surface point of ``b``."""
    sa, sb = surface(a), surface(b)
    spacing = np.asarray(spacing, dtype=np.float64)
    _, nearest = ndimage.distance_transform_edt(~sb, sampling=spacing, return_indices=True)
    pts = np.argwhere(sa)
    near = nearest[(slice(None),) + tuple(pts.T)].T
    return _pair_distance(pts.astype(np.float64), near.astype(np.float64), spacing)


def hd95(pred, target, k: int, spacing: Sequence[float] | None = None) -> float:
    """95th percentile of pooled bidirectional surface distances for class ``k``.

    Percentiles interpolate linearly between order statistics.  Returns
    :data:`UNDEFINED` (NaN) when either class set is empty.
    """
    pred, target = _check_pair(pred, target)
    a, b = pred == k, target == k
    if not a.any() or not b.any():
        return UNDEFINED
    spacing = np.ones(pred.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,):
        raise DimensionError(f"spacing needs {pred.ndim} entries, got {spacing.shape}")
    d = np.concatenate([directed_surface_distances(a, b, spacing), directed_surface_distances(b, a, spacing)])
    return float(np.percentile(d, 95))


def hd95_bruteforce(pred, target, k: int, spacing: Sequence[float] | None = None) -> float:
    """All-pairs reference for :func:`hd95`; O(n*m) in surface sizes."""
    pred, target = _check_pair(pred, target)
    a, b = pred == k, target == k
    if not a.any() or not b.any():
        return UNDEFINED
    spacing = np.ones(pred.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(a)).astype(np.float64)
    pb = np.argwhere(surface(b)).astype(np.float64)
    pair = _pair_distance(pa[:, None, :], pb[None, :, :], spacing)
    return float(np.percentile(np.concatenate([pair.min(axis=1), pair.min(axis=0)]), 95))


# ---------------------------------------------------------------------------
# reports


@dataclass
class ClassMetrics:
    label: int
    dsc: float
    hd95: float

    @property
    def hd_defined(self) -> bool:
        return not is_undefined(self.hd95)


@dataclass
class CaseReport:
    classes: list[ClassMetrics] = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([c.dsc for c in self.classes])) if self.classes else UNDEFINED

    @property
    def mean_hd95(self) -> float:
        defined = [c.hd95 for c in self.classes if c.hd_defined]
        return float(np.mean(defined)) if defined else UNDEFINED

    def to_dict(self) -> dict:
        return {
            "mean_dsc": self.mean_dsc,
            "mean_hd95": None if is_undefined(self.mean_hd95) else self.mean_hd95,
            "classes": [
                {"label": c.label, "dsc": c.dsc, "hd95": None if not c.hd_defined else c.hd95,
                 "hd95_undefined": not c.hd_defined}
                for c in self.classes
            ],
        }

    def format(self, names: Sequence[str] | None = None, with_hd: bool = True) -> str:
        """Fixed-column table: class, DSC in percent, HD95, undefined flag."""
        rows = [f"{'class':<12}{'DSC(%)':>10}{'HD95':>12}  flag"]
        for c in self.classes:
            name = names[c.label] if names else str(c.label)
            hd = f"{c.hd95:12.4f}" if with_hd and c.hd_defined else f"{'-':>12}"
            flag = "" if c.hd_defined or not with_hd else "undefined"
            rows.append(f"{name:<12}{100 * c.dsc:10.2f}{hd}  {flag:<9}".rstrip())
        mean_hd = self.mean_hd95
        hd = f"{mean_hd:12.4f}" if with_hd and not is_undefined(mean_hd) else f"{'-':>12}"
        rows.append(f"{'mean':<12}{100 * self.mean_dsc:10.2f}{hd}")
        return "\n".join(rows) + "\n"


def evaluate_case(pred, target, classes: Iterable[int], spacing: Sequence[float] | None = None,
                  with_hd: bool = True) -> CaseReport:
    pred, target = _check_pair(pred, target)
    report = CaseReport()
    for k in classes:
        hd = hd95(pred, target, k, spacing) if with_hd else UNDEFINED
        report.classes.append(ClassMetrics(int(k), dsc(pred, target, k), hd))
    return report


def aggregate(reports: Sequence[CaseReport]) -> CaseReport:
    """Per-class means across cases; HD95 averages only the cases where it is defined."""
    if not reports:
        return CaseReport()
    out = CaseReport()
    for i, first in enumerate(reports[0].classes):
        d = [r.classes[i].dsc for r in reports]
        h = [r.classes[i].hd95 for r in reports if r.classes[i].hd_defined]
        out.classes.append(ClassMetrics(first.label, float(np.mean(d)), float(np.mean(h)) if h else UNDEFINED))
    return out
