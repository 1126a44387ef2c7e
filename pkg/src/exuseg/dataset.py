"""Fundus image ingestion, resizing, and balanced patch extraction.

Images and their binary ground-truth masks are paired by filename stem,
resized to the 256x256 working resolution (bilinear for images,
nearest-neighbor for masks so they stay binary), and dissolved into
32x32 patches labeled by the mask value under the patch center. The
center convention is local index (16, 16), 0-indexed; valid centers are
rows/cols 16..239, a 224x224 = 50176 candidate grid per image.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .container import MAGIC_PATCHSET, read_container, write_container
from .errors import ContainerError, DecodeError, ShapeError, VersionError
from .tensor import Rng

log = logging.getLogger("exuseg")

WORKING_SIZE = 256
PATCH_SIZE = 32
PATCH_HALF = PATCH_SIZE // 2  # local center index (16, 16)
# Valid centers are rows/cols 16..239: 224 values, one per pixel of the
# half-open evaluation crop [16, 240). Center 240 would also fit a 32x32
# crop geometrically but would give a 225x225 grid instead of the
# 50176-patch dissolution this pipeline is built around.
CENTER_LO = PATCH_HALF
CENTER_HI = WORKING_SIZE - PATCH_SIZE + PATCH_HALF - 1  # 239
VALID_SIDE = CENTER_HI - CENTER_LO + 1                  # 224

LABEL_BACKGROUND = np.array([1, 0], dtype=np.uint8)
LABEL_EXUDATE = np.array([0, 1], dtype=np.uint8)

SUPPORTED_SUFFIXES = {".png", ".ppm", ".pgm"}

PATCHSET_VERSION = 1


@dataclass
class FundusImage:
    id: str
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]
    original_size: tuple[int, int]


@dataclass
class GroundTruthMask:
    id: str
    pixels: np.ndarray  # [H, W] uint8 in {0, 1}


def _open_8bit(path):
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise DecodeError(
            f"{path}: unsupported format {path.suffix!r} "
            f"(supported: {sorted(SUPPORTED_SUFFIXES)})"
        )
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy(), path
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise DecodeError(f"{path}: failed to decode: {e}") from None


def load_image(path) -> FundusImage:
    """Load an 8-bit PNG/PPM color image, scaled to float32 [0, 1]."""
    im, path = _open_8bit(path)
    rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    pixels = rgb.astype(np.float32) / 255.0
    return FundusImage(id=path.stem, pixels=pixels,
                       original_size=(rgb.shape[0], rgb.shape[1]))


def load_mask(path) -> GroundTruthMask:
    """Load a ground-truth mask, binarized at intensity 0.5."""
    im, path = _open_8bit(path)
    gray = np.asarray(im.convert("L"), dtype=np.uint8)
    binary = (gray.astype(np.float32) / 255.0 > 0.5).astype(np.uint8)
    return GroundTruthMask(id=path.stem, pixels=binary)


def _bilinear(src, out_h, out_w):
    """Bilinear resample of [H, W, C] float data; half-pixel-center mapping."""
    h, w = src.shape[:2]
    r = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    c = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    r = np.clip(r, 0, h - 1)
    c = np.clip(c, 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (r - r0)[:, None, None]
    wc = (c - c0)[None, :, None]
    top = src[r0][:, c0] * (1 - wc) + src[r0][:, c1] * wc
    bottom = src[r1][:, c0] * (1 - wc) + src[r1][:, c1] * wc
    return top * (1 - wr) + bottom * wr


def _nearest(src, out_h, out_w):
    """Nearest-neighbor resample; each target cell takes floor((i+0.5)*scale)."""
    h, w = src.shape[:2]
    r = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    c = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    return src[r][:, c]


def resize_to_working(img: FundusImage, size: int = WORKING_SIZE) -> FundusImage:
    """Bilinear resize to the working resolution; values stay in [0, 1]."""
    if img.pixels.shape[:2] == (size, size):
        return img
    out = _bilinear(img.pixels.astype(np.float64), size, size)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return FundusImage(id=img.id, pixels=out, original_size=img.original_size)


def resize_mask(mask: GroundTruthMask, size: int = WORKING_SIZE) -> GroundTruthMask:
    """Nearest-neighbor resize so the mask stays strictly binary."""
    if mask.pixels.shape == (size, size):
        return mask
    return GroundTruthMask(id=mask.id, pixels=_nearest(mask.pixels, size, size))


@dataclass
class PatchSet:
    """A columnar archive of labeled 32x32x3 patches.

    ``pixels`` is float32 in [0, 1] (uint8/255 also accepted for bulk
    synthetic sets); ``labels`` are one-hot rows, background=[1,0],
    exudate=[0,1]; ``centers`` are (row, col) in resized-image
    coordinates; ``source_index`` points into ``sources``.
    """

    pixels: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    source_index: np.ndarray
    sources: list[str]
    provenance: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.pixels)
        if not (len(self.labels) == len(self.centers)
                == len(self.source_index) == n):
            raise ShapeError("patch set columns disagree on record count")

    def __len__(self):
        return len(self.pixels)

    @property
    def class_counts(self) -> dict:
        ex = int(self.labels[:, 1].sum()) if len(self) else 0
        return {"background": len(self) - ex, "exudate": ex}

    @classmethod
    def empty(cls):
        return cls(
            pixels=np.zeros((0, PATCH_SIZE, PATCH_SIZE, 3), dtype=np.float32),
            labels=np.zeros((0, 2), dtype=np.uint8),
            centers=np.zeros((0, 2), dtype=np.int32),
            source_index=np.zeros(0, dtype=np.uint32),
            sources=[],
        )

    @classmethod
    def concat(cls, parts: list["PatchSet"], provenance: dict | None = None):
        if not parts:
            return cls.empty()
        sources = []
        shifted = []
        warnings = []
        for part in parts:
            offset = len(sources)
            sources.extend(part.sources)
            shifted.append(part.source_index.astype(np.uint32) + offset)
            warnings.extend(part.warnings)
        return cls(
            pixels=np.concatenate([p.pixels for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            centers=np.concatenate([p.centers for p in parts]),
            source_index=np.concatenate(shifted),
            sources=sources,
            provenance=provenance or {},
            warnings=warnings,
        )


def candidate_centers(size: int = WORKING_SIZE):
    """All (row, col) whose 32x32 patch fits without padding; 50176 for 256."""
    coords = np.arange(CENTER_LO, CENTER_HI + 1)
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def crop_patch(pixels: np.ndarray, row: int, col: int) -> np.ndarray:
    """The 32x32 crop whose local (16,16) element is (row, col)."""
    return pixels[row - PATCH_HALF : row + PATCH_HALF,
                  col - PATCH_HALF : col + PATCH_HALF]


def extract_balanced(img: FundusImage, mask: GroundTruthMask, per_class: int,
                     rng: Rng) -> PatchSet:
    """Sample up to ``per_class`` patches per class from one image.

    Centers are drawn without replacement from each class partition of
    the candidate grid; a partition smaller than ``per_class`` is sampled
    with replacement and the shortfall is logged as a warning (an empty
    exudate partition simply yields zero exudate patches). Background
    records come first, then exudate.
    """
    if img.pixels.shape != (WORKING_SIZE, WORKING_SIZE, 3):
        raise ShapeError(
            f"image {img.id}: expected {WORKING_SIZE}x{WORKING_SIZE}x3 "
            f"(resized), got {img.pixels.shape}"
        )
    if mask.pixels.shape != (WORKING_SIZE, WORKING_SIZE):
        raise ShapeError(
            f"mask {mask.id}: expected {WORKING_SIZE}x{WORKING_SIZE} "
            f"(resized), got {mask.pixels.shape}"
        )
    if per_class <= 0:
        raise ValueError(f"per_class must be positive, got {per_class}")

    centers = candidate_centers()
    center_values = mask.pixels[CENTER_LO : CENTER_HI + 1,
                                CENTER_LO : CENTER_HI + 1].ravel()
    img_rng = rng.split(img.id)
    warnings = []

    def sample(pool, class_name):
        if len(pool) == 0:
            warnings.append(
                f"{img.id}: no {class_name} centers available; emitting 0 "
                f"of the requested {per_class}"
            )
            return pool
        stream = img_rng.split(class_name)
        if len(pool) >= per_class:
            pick = stream.choice(len(pool), per_class, replace=False)
        else:
            warnings.append(
                f"{img.id}: only {len(pool)} {class_name} centers for "
                f"per_class={per_class}; sampling with replacement"
            )
            pick = stream.integers(len(pool), size=per_class)
        return pool[pick]

    bg_pool = centers[center_values == 0]
    ex_pool = centers[center_values == 1]
    bg_centers = sample(bg_pool, "background")
    ex_centers = sample(ex_pool, "exudate")

    for w in warnings:
        log.warning(w)

    picked = np.concatenate([bg_centers, ex_centers])
    labels = np.concatenate([
        np.tile(LABEL_BACKGROUND, (len(bg_centers), 1)),
        np.tile(LABEL_EXUDATE, (len(ex_centers), 1)),
    ])
    if len(picked):
        pixels = np.stack([crop_patch(img.pixels, r, c) for r, c in picked])
    else:
        pixels = np.zeros((0, PATCH_SIZE, PATCH_SIZE, 3), np.float32)

    return PatchSet(
        pixels=pixels.astype(np.float32),
        labels=labels.astype(np.uint8),
        centers=picked.astype(np.int32),
        source_index=np.zeros(len(picked), dtype=np.uint32),
        sources=[img.id],
        provenance={"per_class": per_class, "image_id": img.id},
        warnings=warnings,
    )


def save_patchset(ps: PatchSet, path) -> None:
    meta = {
        "version": PATCHSET_VERSION,
        "sources": ps.sources,
        "provenance": ps.provenance,
        "warnings": ps.warnings,
        "class_counts": ps.class_counts,
    }
    tensors = {
        "pixels": ps.pixels,
        "labels": ps.labels,
        "centers": ps.centers,
        "source_index": ps.source_index,
    }
    write_container(path, MAGIC_PATCHSET, meta, tensors)


def load_patchset(path) -> PatchSet:
    meta, tensors = read_container(path, MAGIC_PATCHSET)
    if meta["version"] > PATCHSET_VERSION:
        raise VersionError(
            f"{path}: patch archive version {meta['version']} is newer than "
            f"supported version {PATCHSET_VERSION}"
        )
    ps = PatchSet(
        pixels=tensors["pixels"],
        labels=tensors["labels"],
        centers=tensors["centers"],
        source_index=tensors["source_index"],
        sources=list(meta["sources"]),
        provenance=meta["provenance"],
        warnings=list(meta["warnings"]),
    )
    if ps.class_counts != meta["class_counts"]:
        raise ContainerError(
            f"{path}: manifest class counts {meta['class_counts']} disagree "
            f"with label tally {ps.class_counts}"
        )
    return ps
