"""Dataset model, on-disk layout, deterministic splitting, and the synthetic
two-modality benchmark task.

Images are float32 grids of shape (H, W, C) with values in [-1, 1]. On disk a
dataset lives under ``<root>/<modality>/images/<source_id>.png`` next to a
``<root>/<modality>/labels.csv`` manifest with header ``source_id,label``.

The synthetic task paints a filled disk on a dark background; the mean disk
intensity encodes the age label through ``label = 50 * (intensity + 1)``. The
companion source modality is produced by pixel inversion plus optional
Gaussian noise, which gives an exact analytic translation oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as nnf
from PIL import Image

PIXEL_MIN = -1.0
PIXEL_MAX = 1.0

LABEL_RULES = ("disk-intensity",)
MODALITY_TRANSFORMS = ("invert",)


class DatasetError(RuntimeError):
    """Raised for malformed datasets, manifests, or split requests."""


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """One image with its real-valued age label and modality tag."""

    pixels: np.ndarray  # (H, W, C) float32 in [-1, 1]
    label: float
    modality: str
    source_id: str

    def validate(self) -> "LabeledImage":
        p = self.pixels
        if p.ndim != 3:
            raise DatasetError(f"image {self.source_id!r}: expected HxWxC pixels, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise DatasetError(f"image {self.source_id!r}: non-finite pixel values")
        if p.min() < PIXEL_MIN - 1e-6 or p.max() > PIXEL_MAX + 1e-6:
            raise DatasetError(f"image {self.source_id!r}: pixel values outside [-1, 1]")
        if not math.isfinite(self.label):
            raise DatasetError(f"image {self.source_id!r}: non-finite label")
        return self

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.pixels.shape[0], self.pixels.shape[1])


@dataclass(frozen=True, eq=False)
class ModalityDataset:
    """Ordered, immutable collection of labeled images from one modality."""

    images: tuple[LabeledImage, ...]
    modality: str

    def __post_init__(self) -> None:
        ids = set()
        for img in self.images:
            if img.modality != self.modality:
                raise DatasetError(
                    f"image {img.source_id!r} has modality {img.modality!r}, dataset is {self.modality!r}"
                )
            if img.source_id in ids:
                raise DatasetError(f"duplicate source_id {img.source_id!r}")
            ids.add(img.source_id)
            if self.images and img.resolution != self.images[0].resolution:
                raise DatasetError(
                    f"image {img.source_id!r} resolution {img.resolution} differs from {self.images[0].resolution}"
                )

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.images)

    def __getitem__(self, idx: int) -> LabeledImage:
        return self.images[idx]

    @property
    def resolution(self) -> tuple[int, int]:
        if not self.images:
            raise DatasetError("empty dataset has no resolution")
        return self.images[0].resolution

    @property
    def channels(self) -> int:
        if not self.images:
            raise DatasetError("empty dataset has no channel count")
        return self.images[0].pixels.shape[2]

    def labels(self) -> np.ndarray:
        return np.array([img.label for img in self.images], dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> "ModalityDataset":
        return ModalityDataset(tuple(self.images[i] for i in indices), self.modality)


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test partition request.

    With ``counts`` set, the absolute sizes override the fractions (they must
    sum to the dataset size). Otherwise train and val get ``floor(fraction*N)``
    items and the test split receives the remainder.
    """

    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int
    counts: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fr):
            raise DatasetError(f"split fractions must lie in (0,1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must sum to 1, got {sum(fr)!r}")
        if self.counts is not None:
            if len(self.counts) != 3 or any(c <= 0 for c in self.counts):
                raise DatasetError(f"split counts must be three positive integers, got {self.counts}")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of the synthetic disk-intensity task generator."""

    n_source: int = 2000
    n_target: int = 700
    resolution: tuple[int, int] = (64, 64)
    label_rule: str = "disk-intensity"
    modality_transform: str = "invert"
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_source <= 0 or self.n_target <= 0:
            raise DatasetError("synthetic task needs positive image counts")
        if self.resolution[0] < 8 or self.resolution[1] < 8:
            raise DatasetError(f"resolution must be at least 8x8, got {self.resolution}")
        if not 0.0 <= self.noise_std < 1.0:
            raise DatasetError(f"noise_std must lie in [0, 1), got {self.noise_std}")
        if self.label_rule not in LABEL_RULES:
            raise DatasetError(f"unknown label rule {self.label_rule!r}")
        if self.modality_transform not in MODALITY_TRANSFORMS:
            raise DatasetError(f"unknown modality transform {self.modality_transform!r}")


def split_dataset(ds: ModalityDataset, spec: SplitSpec) -> tuple[ModalityDataset, ModalityDataset, ModalityDataset]:
    """Deterministically partition a dataset into train/val/test."""
    n = len(ds)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    if spec.counts is not None:
        n_train, n_val, n_test = spec.counts
        if n_train + n_val + n_test != n:
            raise DatasetError(f"split counts {spec.counts} do not sum to dataset size {n}")
    else:
        n_train = math.floor(spec.train_fraction * n)
        n_val = math.floor(spec.val_fraction * n)
        n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DatasetError(f"split of {n} images yields an empty part: {(n_train, n_val, n_test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    train = ds.subset(perm[:n_train])
    val = ds.subset(perm[n_train:n_train + n_val])
    test = ds.subset(perm[n_train + n_val:])
    return train, val, test


# ---------------------------------------------------------------------------
# Synthetic disk-intensity task
# ---------------------------------------------------------------------------

# background sits inside tanh's responsive range so generators do not have
# to saturate to reproduce it; disk intensities keep a clear margin above it
BACKGROUND = -0.75
INTENSITY_RANGE = (-0.5, 0.6)


def label_for_intensity(intensity: float) -> float:
    """Affine label rule: mean disk intensity -> age in years."""
    return 50.0 * (float(intensity) + 1.0)


def decode_label(pixels: np.ndarray) -> float:
    """Read the age label back out of a disk image.

    The background level is taken from the image border; disk pixels are the
    ones that clearly depart from it. Uses the median so that a constant disk
    decodes bit-exactly.
    """
    img = pixels[..., 0] if pixels.ndim == 3 else pixels
    border = np.concatenate([img[0, :], img[-1, :], img[:, 0], img[:, -1]])
    background = float(np.median(border))
    mask = np.abs(img - background) > 0.12
    if not mask.any():
        raise DatasetError("no disk found while decoding label")
    return label_for_intensity(float(np.median(img[mask])))


def _paint_disk(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    radius = rng.uniform(0.18, 0.35) * min(h, w)
    margin = radius + 1.0
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    intensity = np.float32(rng.uniform(*INTENSITY_RANGE))
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img = np.full((h, w, 1), BACKGROUND, dtype=np.float32)
    img[mask, 0] = intensity
    return img, label_for_intensity(intensity)


def invert_pixels(pixels: np.ndarray) -> np.ndarray:
    """The analytic modality map (its own inverse)."""
    return -pixels


def modality_inverse(transform_id: str) -> Callable[[np.ndarray], np.ndarray]:
    """Exact inverse of the named modality transform, ignoring noise."""
    if transform_id == "invert":
        return invert_pixels
    raise DatasetError(f"unknown modality transform {transform_id!r}")


def generate_synthetic_task(spec: SyntheticTaskSpec) -> tuple[ModalityDataset, ModalityDataset]:
    """Generate (source, target) datasets for the synthetic benchmark.

    Target images carry the label in their disk intensity; source images are
    independently drawn target-style images pushed through the modality
    transform plus Gaussian noise. Fully determined by ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.resolution

    target_images = []
    for i in range(spec.n_target):
        pixels, label = _paint_disk(h, w, rng)
        target_images.append(LabeledImage(pixels, label, "target", f"tgt{i:06d}"))

    source_images = []
    for i in range(spec.n_source):
        pixels, label = _paint_disk(h, w, rng)
        pixels = invert_pixels(pixels)
        if spec.noise_std > 0:
            noise = rng.normal(0.0, spec.noise_std, size=pixels.shape).astype(np.float32)
            pixels = np.clip(pixels + noise, PIXEL_MIN, PIXEL_MAX)
        source_images.append(LabeledImage(pixels, label, "source", f"src{i:06d}"))

    return (
        ModalityDataset(tuple(source_images), "source"),
        ModalityDataset(tuple(target_images), "target"),
    )


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resize_to(ds: ModalityDataset, resolution: tuple[int, int]) -> ModalityDataset:
    """Bilinearly resample every image to ``resolution``, clamping to [-1, 1]."""
    h, w = resolution
    if h < 8 or w < 8:
        raise DatasetError(f"target resolution must be at least 8x8, got {resolution}")
    if ds.resolution == (h, w):
        return ds
    stack = torch.from_numpy(np.stack([img.pixels for img in ds])).permute(0, 3, 1, 2)
    resized = nnf.interpolate(stack, size=(h, w), mode="bilinear", align_corners=False)
    resized = resized.clamp(PIXEL_MIN, PIXEL_MAX).permute(0, 2, 3, 1).contiguous().numpy()
    images = tuple(
        LabeledImage(resized[i], img.label, img.modality, img.source_id) for i, img in enumerate(ds)
    )
    return ModalityDataset(images, ds.modality)


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def _pixels_to_png(pixels: np.ndarray, bits: int) -> Image.Image:
    if bits == 8:
        q = np.clip(np.round((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)
        if q.shape[2] == 1:
            return Image.fromarray(q[..., 0], mode="L")
        if q.shape[2] == 3:
            return Image.fromarray(q, mode="RGB")
        raise DatasetError(f"cannot encode {q.shape[2]}-channel image")
    if bits == 16:
        if pixels.shape[2] != 1:
            raise DatasetError("16-bit output is only supported for grayscale images")
        q = np.clip(np.round((pixels[..., 0] + 1.0) * 32767.5), 0, 65535).astype(np.uint16)
        return Image.fromarray(q, mode="I;16")
    raise DatasetError(f"unsupported bit depth {bits}")


def _png_to_pixels(img: Image.Image, path: Path) -> np.ndarray:
    if img.mode in ("I;16", "I"):
        arr = np.asarray(img, dtype=np.float32)
        arr = arr / 32767.5 - 1.0
    elif img.mode == "L":
        arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    else:
        converted = img.convert("L")
        arr = np.asarray(converted, dtype=np.float32) / 127.5 - 1.0
    if arr.ndim == 2:
        arr = arr[..., None]
    if not np.isfinite(arr).all():
        raise DatasetError(f"unreadable image {path}")
    return np.clip(arr, PIXEL_MIN, PIXEL_MAX).astype(np.float32)


def save_dataset(ds: ModalityDataset, root: Path | str, bits: int = 8) -> Path:
    """Write a dataset in the standard layout; returns the modality directory."""
    root = Path(root)
    mod_dir = root / ds.modality
    img_dir = mod_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(ds, key=lambda im: im.source_id)
    for img in ordered:
        _pixels_to_png(img.pixels, bits).save(img_dir / f"{img.source_id}.png")
    with open(mod_dir / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", "label"])
        for img in ordered:
            writer.writerow([img.source_id, repr(float(img.label))])
    return mod_dir


def load_dataset(root: Path | str, modality: str) -> ModalityDataset:
    """Load a dataset from the standard layout, ordered by source_id."""
    mod_dir = Path(root) / modality
    manifest = mod_dir / "labels.csv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest {manifest}")
    img_dir = mod_dir / "images"

    rows: list[tuple[str, float]] = []
    with open(manifest, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_id", "label"]:
            raise DatasetError(f"manifest {manifest} must start with header 'source_id,label'")
        for row in reader:
            if len(row) != 2:
                raise DatasetError(f"malformed manifest row {row!r}")
            try:
                label = float(row[1])
            except ValueError as exc:
                raise DatasetError(f"bad label {row[1]!r} for {row[0]!r}") from exc
            if not math.isfinite(label):
                raise DatasetError(f"non-finite label for {row[0]!r}")
            rows.append((row[0], label))

    on_disk = {p.stem for p in img_dir.glob("*.png")} if img_dir.is_dir() else set()
    listed = {sid for sid, _ in rows}
    if on_disk - listed:
        extra = sorted(on_disk - listed)[:3]
        raise DatasetError(f"image/label count mismatch: {len(on_disk)} files vs {len(rows)} rows (e.g. {extra})")

    images = []
    for sid, label in sorted(rows):
        path = img_dir / f"{sid}.png"
        if not path.is_file():
            raise DatasetError(f"missing image {path}")
        with Image.open(path) as pil:
            pixels = _png_to_pixels(pil, path)
        images.append(LabeledImage(pixels, label, modality, sid).validate())
    return ModalityDataset(tuple(images), modality)
