"""Datasets: synthetic generation, the on-disk tensor format, augmentation and batching.

Tensor file layout (``.nseg``)::

    bytes 0-3    b"NSEG"
    bytes 4-15   version, dtype code, rank  (uint32 little-endian each)
    rank x 4     extents, uint32 big-endian
    rest         raw scalars, little-endian, row-major

Dtype codes: 1 uint8, 2 float32, 3 float64, 4 int64.  Masks are uint8.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, IntegrityError, MissingFileError, UsageError, VersionError
from .numerics import Rng

TENSOR_MAGIC = b"NSEG"
TENSOR_VERSION = 1
_CODES = {1: np.dtype("<u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8"), 4: np.dtype("<i8")}
_DTYPE_CODE = {np.dtype(v).newbyteorder("="): k for k, v in _CODES.items()}
MANIFEST_NAME = "manifest.txt"


@dataclass
class SegSample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint8
    id: str
    spacing: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise DimensionError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class SegDataset:
    samples: list[SegSample]
    num_classes: int
    size: int
    split: str = "train"
    spacing: tuple[float, ...] = (1.0, 1.0)
    ids: list[str] = field(init=False)

    def __post_init__(self):
        self.ids = [s.id for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _DTYPE_CODE.get(array.dtype.newbyteorder("="))
    if code is None:
        raise UsageError(f"dtype {array.dtype} has no tensor file code")
    head = TENSOR_MAGIC + struct.pack("<III", TENSOR_VERSION, code, array.ndim)
    head += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"tensor file not found: {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise IntegrityError(f"{path}: not a tensor file")
    version, code, rank = struct.unpack_from("<III", data, 4)
    if version != TENSOR_VERSION:
        raise VersionError(f"{path}: tensor format version {version} unsupported")
    if code not in _CODES:
        raise IntegrityError(f"{path}: unknown dtype code {code}")
    if len(data) < 16 + 4 * rank:
        raise IntegrityError(f"{path}: truncated header")
    shape = struct.unpack_from(f">{rank}I", data, 16)
    dtype = _CODES[code]
    offset = 16 + 4 * rank
    count = math.prod(shape)
    if len(data) != offset + count * dtype.itemsize:
        raise IntegrityError(f"{path}: payload size does not match extents {shape}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# synthetic data


def _shape_mask(kind: str, size: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = size / 8, size / 4
    cy, cx = rng.uniform(hi, size - hi, size=2)
    ry, rx = rng.uniform(lo, hi, size=2)
    if kind == "rect":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if kind == "ellipse":
        return r2 <= 1.0
    return (r2 <= 1.0) & (r2 >= 0.35)  # annulus


def _label_colors(k: int) -> np.ndarray:
    """Per-label mean intensity, [K, 3], monotone in the label."""
    levels = np.linspace(0.15, 0.85, k)
    tilt = np.array([0.0, 0.05, -0.05])
    return np.clip(levels[:, None] + tilt[None, :] * (np.arange(k)[:, None] % 2), 0.0, 1.0)


def synthetic_sample(size: int, k: int, rng: Rng, sample_id: str, noise: float = 0.05) -> SegSample:
    colors = _label_colors(k)
    kinds = ("ellipse", "rect", "annulus")
    while True:
        m = int(rng.integers(1, k))  # 1 .. K-1 foreground regions
        labels = rng.generator.choice(np.arange(1, k), size=m, replace=False)
        mask = np.zeros((size, size), dtype=np.uint8)
        for label in labels:
            region = _shape_mask(kinds[int(rng.integers(0, len(kinds)))], size, rng)
            mask[region] = label
        if all((mask == label).sum() > 0 for label in labels):
            break
    image = colors[mask].transpose(2, 0, 1) + rng.normal((3, size, size), noise)
    return SegSample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, sample_id)


def generate_synthetic(n: int, size: int, k: int, rng: Rng, split: str = "train") -> SegDataset:
    """``n`` images of geometric regions whose intensity tracks their label."""
    if k < 2:
        raise ConfigError(f"need at least 2 classes, got {k}")
    if n < 1 or size < 8:
        raise ConfigError(f"need n >= 1 and size >= 8, got n={n}, size={size}")
    samples = [synthetic_sample(size, k, rng.child("sample", i), f"case{i:04d}") for i in range(n)]
    return SegDataset(samples, k, size, split)


# ---------------------------------------------------------------------------
# on-disk datasets


def write_dataset(dataset: SegDataset, out_dir) -> Path:
    """Write tensor files plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = [
        "# gctx-unet dataset manifest",
        f"classes={dataset.num_classes}",
        f"size={dataset.size}",
        f"split={dataset.split}",
        f"spacing={','.join(str(s) for s in dataset.spacing)}",
    ]
    for s in dataset.samples:
        write_tensor(out / "images" / f"{s.id}.nseg", s.image.astype(np.float32))
        write_tensor(out / "masks" / f"{s.id}.nseg", s.mask.astype(np.uint8))
        lines.append(f"{s.id}\timages/{s.id}.nseg\tmasks/{s.id}.nseg")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _resolve_manifest(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    return path


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[1:] == (size, size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize; never invents labels."""
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return mask[rows[:, None], cols[None, :]]


def load_dataset(manifest_path) -> SegDataset:
    manifest = _resolve_manifest(manifest_path)
    root = manifest.parent
    header: dict[str, str] = {}
    entries: list[tuple[str, str, str]] = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line and "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 3:
            raise ConfigError(f"{manifest}:{lineno}: expected 'id image mask', got {raw!r}")
        entries.append((parts[0], parts[1], parts[2]))
    try:
        k = int(header["classes"])
        size = int(header["size"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{manifest}: header needs integer 'classes' and 'size'") from exc
    spacing = tuple(float(s) for s in header.get("spacing", "1,1").split(","))
    seen = set()
    samples = []
    for sid, img_rel, mask_rel in entries:
        if sid in seen:
            raise ConfigError(f"{manifest}: duplicate sample id {sid!r}")
        seen.add(sid)
        img_path, mask_path = root / img_rel, root / mask_rel
        for p in (img_path, mask_path):
            if not p.is_file():
                raise MissingFileError(f"sample {sid!r}: missing file {p}")
        image, mask = read_tensor(img_path), read_tensor(mask_path)
        if image.ndim != 3 or mask.ndim != 2 or image.shape[1:] != mask.shape:
            raise DimensionError(f"sample {sid!r}: image {image.shape} and mask {mask.shape} do not align")
        if mask.size and int(mask.max()) >= k:
            raise DimensionError(f"sample {sid!r}: label {int(mask.max())} >= classes {k}")
        samples.append(SegSample(resize_image(image.astype(np.float32), size),
                                 resize_mask(mask.astype(np.uint8), size), sid, spacing))
    return SegDataset(samples, k, size, header.get("split", "train"), spacing)


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass(frozen=True)
class AugParams:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0

    @classmethod
    def draw(cls, rng: Rng) -> "AugParams":
        u = rng.random(2)
        return cls(bool(u[0] < 0.5), bool(u[1] < 0.5), int(rng.integers(0, 4)))


def apply_aug(arr: np.ndarray, aug: AugParams) -> np.ndarray:
    """Apply the geometric transform to the trailing two axes."""
    if aug.hflip:
        arr = arr[..., :, ::-1]
    if aug.vflip:
        arr = arr[..., ::-1, :]
    if aug.rot90:
        arr = np.rot90(arr, aug.rot90, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def augment(sample: SegSample, rng: Rng) -> SegSample:
    """Random flips (p=0.5 each) and a rotation by a multiple of 90 degrees, shared by image and mask."""
    aug = AugParams.draw(rng)
    return replace(sample, image=apply_aug(sample.image, aug), mask=apply_aug(sample.mask, aug))


def epoch_plan(n: int, batch_size: int, shuffle: bool, rng: Rng | None, augment: bool = False
               ) -> list[list[tuple[int, AugParams]]]:
    """The full batch sequence of one epoch, fixed up front from ``rng``."""
    if n == 0:
        raise UsageError("cannot batch an empty dataset")
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if (shuffle or augment) and rng is None:
        raise UsageError("shuffling or augmentation needs an rng")
    order = rng.permutation(n) if shuffle else np.arange(n)
    augs = [AugParams.draw(rng) if augment else AugParams() for _ in range(n)]
    items = [(int(i), augs[j]) for j, i in enumerate(order)]
    return [items[i: i + batch_size] for i in range(0, n, batch_size)]


def collate(dataset: SegDataset, batch: Sequence[tuple[int, AugParams]]) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([apply_aug(dataset[i].image, a) for i, a in batch])
    masks = np.stack([apply_aug(dataset[i].mask, a) for i, a in batch])
    return torch.from_numpy(images), torch.from_numpy(masks.astype(np.int64))


def batches(dataset: SegDataset, batch_size: int, shuffle: bool = False, rng: Rng | None = None,
            augment: bool = False) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images[B,C,H,W], masks[B,H,W])``; the last batch may be short."""
    for batch in epoch_plan(len(dataset), batch_size, shuffle, rng, augment):
        yield collate(dataset, batch)


def image_from_file(path) -> np.ndarray:
    """Read a ``.nseg``/``.npy`` tensor or (with Pillow installed) a common image format as [C,H,W] in [0,1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image not found: {path}")
    if path.suffix == ".nseg":
        arr = read_tensor(path)
    elif path.suffix == ".npy":
        arr = np.load(path)
    else:
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise UsageError("install Pillow to convert common image formats") from exc
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    if arr.ndim != 3:
        raise DimensionError(f"{path}: expected [C,H,W] image, got shape {arr.shape}")
    return arr.astype(np.float32)
