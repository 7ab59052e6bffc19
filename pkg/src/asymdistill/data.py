"""Tile ingestion, degradations, augmentation, view pairing and the synthetic dataset.

Images are ``H x W x 3`` float arrays in ``[0, 1]`` throughout; batches stack
them along a leading axis.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ConfigurationError, ManifestError, SplitError, ValidationError

logger = logging.getLogger(__name__)

DEGRADATIONS = ("crop_pad", "downsample", "mask", "external_pair")
PAIR_MODES = ("symmetric", "asymmetric")
N_NUCLEAR_CLASSES = 6  # background + 5 nuclear types
N_TISSUE_CLASSES = 4
MANIFEST_COLUMNS = ("image_path", "tissue_label", "cell_label", "pair_path", "split")


# --------------------------------------------------------------------------- types


@dataclass
class PairedSample:
    dense: np.ndarray
    sparse: Optional[np.ndarray]
    tissue_label: int
    cell_label: Optional[int] = None
    source_id: str = ""
    nuclei: Optional[np.ndarray] = None  # H x W nuclear class ids, when known


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-augmentation application probabilities plus their fixed constants.

    Defaults follow the training recipe: flips and crops always, noise 0.3,
    rotation 0.4, solarize 0.3, colour jitter always.
    """

    flip: float = 1.0
    crop: float = 1.0
    gaussian_noise: float = 0.3
    rotation: float = 0.4
    solarize: float = 0.3
    color_jitter: float = 1.0
    crop_scale_range: tuple[float, float] = (0.75, 1.0)
    noise_sigma: float = 0.05
    free_rotation: bool = False
    solarize_threshold: float = 0.5
    jitter_strength: float = 0.2

    def __post_init__(self):
        for name in ("flip", "crop", "gaussian_noise", "rotation", "solarize", "color_jitter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(flip=0.0, crop=0.0, gaussian_noise=0.0, rotation=0.0, solarize=0.0, color_jitter=0.0)


@dataclass
class ManifestRecord:
    image_path: Path
    tissue_label: int
    cell_label: Optional[int]
    pair_path: Optional[Path]
    split: str
    source_id: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    tissue_classes: list[str]
    cell_classes: list[str]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def splits(self) -> list[str]:
        return sorted({r.split for r in self.records})


@dataclass
class TileDataset:
    """Column-oriented store of paired samples (one row per tile)."""

    dense: np.ndarray
    sparse: Optional[np.ndarray]
    tissue: np.ndarray
    cell: Optional[np.ndarray] = None
    source_ids: Optional[list[str]] = None
    nuclei: Optional[np.ndarray] = None
    degradation: str = "downsample"
    n_tissue_classes: int = N_TISSUE_CLASSES
    n_cell_classes: int = N_NUCLEAR_CLASSES - 1

    def __post_init__(self):
        n = len(self.dense)
        for name in ("sparse", "tissue", "cell", "nuclei"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValidationError(f"{name} has {len(arr)} rows, expected {n}")
        if self.source_ids is None:
            self.source_ids = [f"tile{i:06d}" for i in range(n)]

    def __len__(self):
        return len(self.dense)

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(
            dense=self.dense[i],
            sparse=None if self.sparse is None else self.sparse[i],
            tissue_label=int(self.tissue[i]),
            cell_label=None if self.cell is None else int(self.cell[i]),
            source_id=self.source_ids[i],
            nuclei=None if self.nuclei is None else self.nuclei[i],
        )

    def subset(self, idx) -> "TileDataset":
        idx = np.asarray(idx, dtype=np.int64)
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(
            self,
            dense=self.dense[idx],
            sparse=take(self.sparse),
            tissue=self.tissue[idx],
            cell=take(self.cell),
            nuclei=take(self.nuclei),
            source_ids=[self.source_ids[i] for i in idx],
        )

    def view(self, which: str) -> np.ndarray:
        if which == "dense":
            return self.dense
        if which == "sparse":
            if self.sparse is None:
                raise ConfigurationError("dataset has no sparse view")
            return self.sparse
        raise ValueError(f"unknown view {which!r}")

    def labels(self, task: str) -> np.ndarray:
        if task == "tissue":
            return self.tissue
        if task == "cell":
            if self.cell is None:
                raise ConfigurationError("dataset carries no cell labels")
            return self.cell
        raise ConfigurationError(f"unknown task {task!r}")

    def n_classes(self, task: str) -> int:
        return self.n_tissue_classes if task == "tissue" else self.n_cell_classes


# ------------------------------------------------------------------ validation


def check_tile(img, name="img") -> np.ndarray:
    """Validate a single ``H x W x 3`` tile and return it as a float array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name} must be H x W x 3, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X, name="X") -> np.ndarray:
    """Validate an ``N x H x W x 3`` batch of tiles."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValidationError(f"{name} must be N x H x W x 3, got shape {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------- degradations


def degrade_crop_pad(img, crop_px: int, out_px: int) -> np.ndarray:
    """Keep the centre ``crop_px`` window and zero-pad it to ``out_px``."""
    img = check_tile(img)
    h, w = img.shape[:2]
    if crop_px > min(h, w) or crop_px <= 0:
        raise ValueError(f"crop_px={crop_px} must lie in [1, {min(h, w)}]")
    if out_px < crop_px:
        raise ValueError(f"out_px={out_px} must be >= crop_px={crop_px}")
    top, left = (h - crop_px) // 2, (w - crop_px) // 2
    off = (out_px - crop_px) // 2
    out = np.zeros((out_px, out_px, 3), dtype=img.dtype)
    out[off : off + crop_px, off : off + crop_px] = img[top : top + crop_px, left : left + crop_px]
    return out


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # Row i holds the overlap of output bin i with every input pixel, normalised to 1.
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def degrade_downsample(img, low_px: int, out_px: int) -> np.ndarray:
    """Area-average to ``low_px`` square then nearest-neighbour upsample to ``out_px``."""
    img = check_tile(img)
    if low_px <= 0:
        raise ValueError(f"low_px must be positive, got {low_px}")
    if low_px > out_px:
        raise ValueError(f"low_px={low_px} must be <= out_px={out_px}")
    h, w = img.shape[:2]
    wr, wc = _area_weights(h, low_px), _area_weights(w, low_px)
    small = np.einsum("ih,hwc,jw->ijc", wr, img.astype(np.float64), wc)
    idx = (np.arange(out_px) * low_px) // out_px
    out = small[idx][:, idx]
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def mask_to_3channel(mask, n_classes: int = N_NUCLEAR_CLASSES) -> np.ndarray:
    """Scale class ids to ``[0, 1]`` and repeat them over three channels."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise ValidationError(f"mask must be H x W or H x W x 1, got shape {np.shape(mask)}")
    if not np.issubdtype(m.dtype, np.integer):
        if not np.all(np.equal(np.mod(m, 1), 0)):
            raise ValidationError("mask values must be integer class ids")
        m = m.astype(np.int64)
    if m.size and (m.min() < 0 or m.max() >= n_classes):
        raise ValidationError(f"mask class ids must lie in [0, {n_classes - 1}]")
    scaled = (m.astype(np.float32) / (n_classes - 1))[..., None]
    return np.repeat(scaled, 3, axis=2)


def degrade(img, degradation: str, img_px: Optional[int] = None) -> np.ndarray:
    """Apply a pixel degradation with constants scaled to the tile size.

    Crop/pad keeps the central half; downsampling goes to 7 x 7.
    """
    img = check_tile(img)
    side = img_px or img.shape[0]
    if degradation == "crop_pad":
        return degrade_crop_pad(img, side // 2, side)
    if degradation == "downsample":
        return degrade_downsample(img, 7, side)
    raise ValueError(f"{degradation!r} is not a pixel degradation")


# ---------------------------------------------------------------- augmentation


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def _rotate_free(img: np.ndarray, angle: float) -> np.ndarray:
    theta = torch.tensor(
        [[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0]], dtype=torch.float32
    )[None]
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    grid = F.affine_grid(theta, list(t.shape), align_corners=False)
    return F.grid_sample(t, grid, align_corners=False)[0].permute(1, 2, 0).numpy()


def _grayscale(img: np.ndarray) -> np.ndarray:
    return (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype))[..., None]


def augment(img, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the stochastic augmentation policy to one tile.

    Every augmentation draws its coin and parameters from ``rng`` in a fixed
    order, whether or not it is applied, so the random stream consumed per
    call does not depend on which augmentations fired.
    """
    out = np.array(img, dtype=np.float32, copy=True)
    side_h, side_w = out.shape[:2]
    u = rng.random(6)

    flip_lr, flip_ud = rng.random(2) < 0.5
    if u[0] < policy.flip:
        if flip_lr:
            out = out[:, ::-1]
        if flip_ud:
            out = out[::-1]

    scale = rng.uniform(*policy.crop_scale_range)
    pos = rng.random(2)
    if u[1] < policy.crop:
        side = max(1, int(round(np.sqrt(scale) * min(side_h, side_w))))
        top = int(pos[0] * (side_h - side + 1)) if side < side_h else 0
        left = int(pos[1] * (side_w - side + 1)) if side < side_w else 0
        top, left = min(top, side_h - side), min(left, side_w - side)
        if side < min(side_h, side_w):
            out = _resize(out[top : top + side, left : left + side], side_h)

    noise = rng.standard_normal(out.shape).astype(np.float32)
    if u[2] < policy.gaussian_noise:
        out = out + policy.noise_sigma * noise

    k = int(rng.integers(1, 4))
    angle = rng.uniform(-np.pi, np.pi)
    if u[3] < policy.rotation:
        out = _rotate_free(out, angle) if policy.free_rotation else np.rot90(out, k)

    if u[4] < policy.solarize:
        out = np.where(out >= policy.solarize_threshold, 1.0 - out, out)

    s = policy.jitter_strength
    b, c, sat = rng.uniform(1 - s, 1 + s, size=3)
    if u[5] < policy.color_jitter:
        out = np.clip(out * b, 0.0, 1.0)
        out = np.clip((out - out.mean()) * c + out.mean(), 0.0, 1.0)
        gray = _grayscale(out)
        out = (out - gray) * sat + gray

    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


# -------------------------------------------------------------------- pairing


def sparse_view(sample: PairedSample, degradation: str) -> np.ndarray:
    """Return the information-sparse input of ``sample`` under ``degradation``."""
    if degradation not in DEGRADATIONS:
        raise ConfigurationError(f"unknown degradation {degradation!r}")
    if sample.sparse is not None:
        return sample.sparse
    if degradation in ("crop_pad", "downsample"):
        return degrade(sample.dense, degradation)
    if degradation == "mask" and sample.nuclei is not None:
        return mask_to_3channel(sample.nuclei)
    raise ManifestError(f"sample {sample.source_id!r}: {degradation} pairing needs a paired image (pair_path)")


def make_pair(
    sample: PairedSample,
    mode: str,
    degradation: str,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    symmetric_source: str = "sparse",
) -> tuple[np.ndarray, np.ndarray]:
    """Build the two branch inputs for one sample.

    Asymmetric pairs put the sparse input on branch a and the dense input on
    branch b. Symmetric pairs feed two independent augmentations of one input,
    the sparse one unless ``symmetric_source="dense"``.
    """
    if mode not in PAIR_MODES:
        raise ConfigurationError(f"unknown pairing mode {mode!r}")
    sparse = sparse_view(sample, degradation)
    if mode == "asymmetric":
        a, b = sparse, sample.dense
    else:
        src = sparse if symmetric_source == "sparse" else sample.dense
        a = b = src
    return augment(a, policy, rng), augment(b, policy, rng)


# ------------------------------------------------------------ synthetic data

_BASE_RGB = np.array([0.86, 0.62, 0.78], dtype=np.float32)
_NUCLEUS_RGB = np.array([0.34, 0.20, 0.52], dtype=np.float32)
# Per-type nucleus tint offsets; small on purpose so type is subtle in the dense view.
_NUCLEUS_TINT = np.array(
    [
        [0.10, -0.05, -0.06],
        [-0.06, 0.08, -0.04],
        [-0.05, -0.05, 0.10],
        [0.07, 0.07, -0.08],
        [-0.08, 0.02, 0.06],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class SynthParams:
    """Constants of the procedural tile generator.

    Tissue class ``t`` splits into a coarse bit ``t // 2`` (radial tone layout,
    survives 7 x 7 downsampling) and a fine bit ``t % 2`` (stripe period,
    destroyed by downsampling). Two weaker traces of the fine bit survive
    downsampling: ``fine_leak``, a mean tone shift, and a low-frequency mottle
    whose amplitude is ``mottle_amplitude[fine]``. The mottle has random phases
    and orientations, so its pixels average to zero and only its energy carries
    the label.
    """

    stripe_periods: tuple[float, float] = (2.5, 5.0)
    stripe_amplitude: float = 0.22
    fine_leak: float = 0.0
    mottle_amplitude: tuple[float, float] = (0.0, 0.10)
    mottle_period: tuple[float, float] = (0.3, 0.6)  # fraction of tile side
    mottle_waves: int = 4
    coarse_amplitude: float = 0.16
    brightness_jitter: float = 0.04
    n_nuclei: tuple[int, int] = (5, 9)
    nucleus_radius: tuple[float, float] = (0.045, 0.065)  # fraction of tile side
    nucleus_tint_scale: float = 0.6


def synth_sample(
    rng: np.random.Generator,
    tissue_class: int,
    img_px: int = 64,
    degradation: str = "downsample",
    cell_class: Optional[int] = None,
    params: SynthParams = SynthParams(),
    source_id: str = "",
) -> PairedSample:
    """Draw one procedural tile with its sparse counterpart and labels."""
    if not 0 <= tissue_class < N_TISSUE_CLASSES:
        raise ValueError(f"tissue_class must lie in [0, {N_TISSUE_CLASSES - 1}], got {tissue_class}")
    if img_px < 32:
        raise ValueError(f"img_px must be >= 32, got {img_px}")
    n_types = N_NUCLEAR_CLASSES - 1
    if cell_class is not None and not 0 <= cell_class < n_types:
        raise ValueError(f"cell_class must lie in [0, {n_types - 1}], got {cell_class}")
    coarse, fine = divmod(tissue_class, 2)
    p = params

    yy, xx = np.mgrid[0:img_px, 0:img_px].astype(np.float32) + 0.5
    cy, cx = img_px / 2 + rng.uniform(-0.08, 0.08, size=2) * img_px
    r = np.hypot(yy - cy, xx - cx) / (img_px / 2)
    radial = np.clip(1.0 - r, 0.0, 1.0) ** 1.5  # 1 at centre, 0 beyond the inscribed circle
    sign = 1.0 if coarse == 0 else -1.0
    tone = 1.0 + sign * p.coarse_amplitude * (radial - 0.35)

    period = p.stripe_periods[fine] * rng.uniform(0.92, 1.08)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    stripes = p.stripe_amplitude * (wave - 0.5) - (p.fine_leak if fine else 0.0)
    # Mottle: a sum of randomly oriented low-frequency waves whose strength follows the fine bit.
    k = p.mottle_waves
    m_theta = rng.uniform(0, np.pi, size=k)
    m_period = rng.uniform(*p.mottle_period, size=k) * img_px
    m_phase = rng.uniform(0, 2 * np.pi, size=k)
    proj = (xx[..., None] * np.cos(m_theta) + yy[..., None] * np.sin(m_theta)) / m_period
    mottle = np.cos(2 * np.pi * proj + m_phase).sum(axis=-1) * np.sqrt(2.0 / k)
    tone = tone + p.mottle_amplitude[fine] * mottle

    shade = 1.0 + rng.uniform(-p.brightness_jitter, p.brightness_jitter)
    base = _BASE_RGB + rng.uniform(-0.03, 0.03, size=3)
    img = base[None, None, :] * (tone * shade)[..., None] + stripes[..., None] * np.array([1.0, 0.8, 0.9])

    # Nuclei: the majority type decides the cell label.
    nuclei = np.zeros((img_px, img_px), dtype=np.int64)
    major = int(rng.integers(n_types)) if cell_class is None else int(cell_class)
    n = int(rng.integers(p.n_nuclei[0], p.n_nuclei[1] + 1))
    n_major = n // 2 + 1
    others = [k for k in range(n_types) if k != major]
    types = [major] * n_major + [others[int(rng.integers(len(others)))] for _ in range(n - n_major)]
    placed: list[tuple[float, float, float]] = []
    kept: list[int] = []
    for kind in types:
        for _ in range(50):
            rad = rng.uniform(*p.nucleus_radius) * img_px
            ny, nx = rng.uniform(rad + 1, img_px - rad - 1, size=2)
            if all(np.hypot(ny - qy, nx - qx) > rad + qr + 1.5 for qy, qx, qr in placed):
                break
        else:
            continue
        placed.append((ny, nx, rad))
        kept.append(kind)
        ecc = rng.uniform(0.8, 1.25)
        inside = ((yy - ny) / (rad * ecc)) ** 2 + ((xx - nx) * ecc / rad) ** 2 <= 1.0
        nuclei[inside] = kind + 1
        colour = _NUCLEUS_RGB + p.nucleus_tint_scale * _NUCLEUS_TINT[kind] + rng.normal(0, 0.015, size=3)
        img[inside] = colour * shade
    # Rejection sampling may drop a nucleus, so recount the placed objects.
    cell = int(np.argmax(np.bincount(kept, minlength=n_types))) if kept else major

    dense = np.clip(img, 0.0, 1.0).astype(np.float32)
    if degradation in ("crop_pad", "downsample"):
        sparse = degrade(dense, degradation)
    elif degradation == "mask":
        sparse = mask_to_3channel(nuclei)
    else:
        sparse = None
    return PairedSample(
        dense=dense,
        sparse=sparse,
        tissue_label=tissue_class,
        cell_label=cell,
        source_id=source_id,
        nuclei=nuclei.astype(np.uint8),
    )


def synth_dataset(
    n: int,
    seed: int = 0,
    degradation: str = "downsample",
    img_px: int = 64,
    n_classes: int = N_TISSUE_CLASSES,
    params: SynthParams = SynthParams(),
    prefix: str = "syn",
) -> TileDataset:
    """Generate ``n`` class-balanced samples deterministically from ``seed``."""
    if n_classes != N_TISSUE_CLASSES:
        raise ValueError(f"the generator produces {N_TISSUE_CLASSES} tissue classes")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.arange(n) % n_classes)
    cells = rng.permutation(np.arange(n) % (N_NUCLEAR_CLASSES - 1))
    samples = [
        synth_sample(
            rng, int(t), img_px, degradation, cell_class=int(c), params=params, source_id=f"{prefix}{seed}-{i:06d}"
        )
        for i, (t, c) in enumerate(zip(classes, cells))
    ]
    return _stack(samples, degradation)


def _stack(samples: Sequence[PairedSample], degradation: str) -> TileDataset:
    has_sparse = all(s.sparse is not None for s in samples)
    has_cell = all(s.cell_label is not None for s in samples)
    has_nuclei = all(s.nuclei is not None for s in samples)
    return TileDataset(
        dense=np.stack([s.dense for s in samples]).astype(np.float32),
        sparse=np.stack([s.sparse for s in samples]).astype(np.float32) if has_sparse else None,
        tissue=np.array([s.tissue_label for s in samples], dtype=np.int64),
        cell=np.array([s.cell_label for s in samples], dtype=np.int64) if has_cell else None,
        source_ids=[s.source_id for s in samples],
        nuclei=np.stack([s.nuclei for s in samples]) if has_nuclei else None,
        degradation=degradation,
    )


# ------------------------------------------------------------------ batching


class BatchSampler:
    """Index batches over a fixed random subsample of a dataset.

    The subsample is drawn once at construction; each pass reshuffles it.
    Trailing samples that do not fill a batch are dropped.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator, fraction: float = 1.0):
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
        keep = int(round(fraction * n))
        if keep < batch_size:
            raise ConfigurationError(
                f"fraction {fraction} of {n} samples leaves {keep}, fewer than one batch of {batch_size}"
            )
        self.batch_size = batch_size
        self.rng = rng
        self.indices = np.sort(rng.choice(n, size=keep, replace=False)) if keep < n else np.arange(n)

    def __len__(self):
        return len(self.indices) // self.batch_size

    def __iter__(self) -> Iterator[np.ndarray]:
        order = self.rng.permutation(self.indices)
        for b in range(len(self)):
            yield order[b * self.batch_size : (b + 1) * self.batch_size]


def batch_iter(
    dataset: TileDataset, batch_size: int, rng: np.random.Generator, fraction: float = 1.0, epochs: int = 1
) -> Iterator[TileDataset]:
    sampler = BatchSampler(len(dataset), batch_size, rng, fraction)
    for _ in range(epochs):
        for idx in sampler:
            yield dataset.subset(idx)


# ------------------------------------------------------------------ manifests


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def _class_table(values: list[str]) -> list[str]:
    uniq = sorted(set(values))
    if all(v.lstrip("-").isdigit() for v in uniq):
        uniq = sorted(uniq, key=int)
    return uniq


def load_manifest(path) -> DatasetManifest:
    """Read and validate a CSV tile manifest.

    Paths are resolved relative to the manifest's directory. An optional
    ``source_id`` column groups tiles from one source (patient, slide); it
    defaults to the image path. A source may not appear in two splits.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        rows = list(reader)

    tissue_table = _class_table([r["tissue_label"] for r in rows])
    cell_values = [r["cell_label"] for r in rows if r["cell_label"]]
    cell_table = _class_table(cell_values)
    records = []
    for i, row in enumerate(rows):
        image = root / row["image_path"]
        if not image.is_file():
            raise ValidationError(f"{path}: row {i}: image not found: {row['image_path']}")
        pair = root / row["pair_path"] if row["pair_path"] else None
        if pair is not None and not pair.is_file():
            raise ValidationError(f"{path}: row {i}: paired image not found: {row['pair_path']}")
        if not row["split"]:
            raise ValidationError(f"{path}: row {i}: empty split")
        records.append(
            ManifestRecord(
                image_path=image,
                tissue_label=tissue_table.index(row["tissue_label"]),
                cell_label=cell_table.index(row["cell_label"]) if row["cell_label"] else None,
                pair_path=pair,
                split=row["split"],
                source_id=row.get("source_id") or row["image_path"],
            )
        )

    owners: dict[str, str] = {}
    for i, rec in enumerate(records):
        prev = owners.setdefault(rec.source_id, rec.split)
        if prev != rec.split:
            raise SplitError(f"{path}: row {i}: source {rec.source_id!r} appears in splits {prev!r} and {rec.split!r}")
    return DatasetManifest(records=records, tissue_classes=tissue_table, cell_classes=cell_table, root=root)


def load_tiles(manifest: DatasetManifest, split: str, degradation: str) -> TileDataset:
    """Materialise one manifest split as a :class:`TileDataset`.

    ``image_path`` is the labelled tile. For ``mask`` pairing the pair is a
    class-id PNG and becomes the sparse view; for ``external_pair`` the pair is
    the information-dense restain and the labelled tile is the sparse view.
    """
    recs = manifest.split(split)
    if not recs:
        raise ConfigurationError(f"split {split!r} is empty")
    samples = []
    for rec in recs:
        image = _read_png(rec.image_path)
        nuclei = None
        if degradation == "mask":
            if rec.pair_path is None:
                raise ManifestError(f"{rec.source_id}: mask pairing needs pair_path")
            nuclei = _read_mask(rec.pair_path)
            dense, sparse = image, mask_to_3channel(nuclei)
        elif degradation == "external_pair":
            if rec.pair_path is None:
                raise ManifestError(f"{rec.source_id}: external pairing needs pair_path")
            dense, sparse = _read_png(rec.pair_path), image
        else:
            dense, sparse = image, degrade(image, degradation)
        if dense.shape != sparse.shape:
            raise ValidationError(f"{rec.source_id}: paired views differ in shape {dense.shape} vs {sparse.shape}")
        samples.append(PairedSample(dense, sparse, rec.tissue_label, rec.cell_label, rec.source_id, nuclei))
    ds = _stack(samples, degradation)
    ds.n_tissue_classes = len(manifest.tissue_classes)
    ds.n_cell_classes = max(1, len(manifest.cell_classes))
    return ds


def _atomic_write_png(arr: np.ndarray, path: Path, mode: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr, mode=mode).save(tmp, format="PNG")
    os.replace(tmp, path)


def write_dataset(ds: TileDataset, out_dir, split: str, manifest_name: str = "manifest.csv", append: bool = False) -> Path:
    """Write tiles as 8-bit PNGs plus a manifest CSV.

    Mask-paired datasets also write the nuclear class-id map as a
    single-channel PNG referenced by ``pair_path``.
    """
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    manifest = out / manifest_name
    rows = []
    for i in range(len(ds)):
        sid = ds.source_ids[i]
        rel = Path("tiles") / f"{sid}.png"
        _atomic_write_png((np.round(ds.dense[i] * 255)).astype(np.uint8), out / rel, "RGB")
        pair = ""
        if ds.degradation == "mask" and ds.nuclei is not None:
            prel = Path("tiles") / f"{sid}_mask.png"
            _atomic_write_png(ds.nuclei[i].astype(np.uint8), out / prel, "L")
            pair = prel.as_posix()
        cell = "" if ds.cell is None else str(int(ds.cell[i]))
        rows.append([rel.as_posix(), str(int(ds.tissue[i])), cell, pair, split, sid])
    mode = "a" if append and manifest.exists() else "w"
    tmp = manifest.with_name(manifest.name + ".tmp")
    existing = manifest.read_text() if mode == "a" else ""
    with tmp.open("w", newline="") as fh:
        if existing:
            fh.write(existing)
        writer = csv.writer(fh, lineterminator="\n")
        if not existing:
            writer.writerow([*MANIFEST_COLUMNS, "source_id"])
        writer.writerows(rows)
    os.replace(tmp, manifest)
    return manifest
