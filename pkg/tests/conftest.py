"""Shared synthetic data builders and model presets for the test suite."""
import numpy as np
import pytest
from PIL import Image

from exuseg.dataset import PatchSet
from exuseg.model import default_config
from exuseg.tensor import Rng

SMALL_CHANNELS = (4, 4, 8, 8, 8, 8, 8, 8)
TINY_CHANNELS = (2, 2, 2, 2, 2, 2, 2, 2)

EXUDATE_COLOR = np.array([0.90, 0.80, 0.25])   # bright yellow-ish
BACKGROUND_COLOR = np.array([0.25, 0.10, 0.05])  # dark reddish fundus


def small_config(dropout_p=0.5):
    return default_config(conv_channels=SMALL_CHANNELS, dropout_p=dropout_p)


def tiny_config(dropout_p=0.0):
    return default_config(conv_channels=TINY_CHANNELS, dropout_p=dropout_p)


def blob_patchset(n, seed, noise=0.03):
    """Separable synthetic patches: bright blobs (exudate) vs dark ground."""
    rng = Rng(seed)
    half = n // 2
    pixels = np.empty((n, 32, 32, 3))
    pixels[:] = BACKGROUND_COLOR
    yy, xx = np.mgrid[0:32, 0:32]
    for i in range(half):
        r = 5 + (i % 5)
        blob = ((yy - 16) ** 2 + (xx - 16) ** 2) <= r ** 2
        pixels[i][blob] = EXUDATE_COLOR
    pixels = pixels + rng.split("noise").normal((n, 32, 32, 3), 0, noise)
    pixels = np.clip(pixels, 0, 1).astype(np.float32)
    labels = np.zeros((n, 2), dtype=np.uint8)
    labels[:half, 1] = 1
    labels[half:, 0] = 1
    return PatchSet(
        pixels=pixels,
        labels=labels,
        centers=np.full((n, 2), 16, dtype=np.int32),
        source_index=np.zeros(n, dtype=np.uint32),
        sources=["synthetic"],
        provenance={"generator": "blob_patchset", "seed": seed},
    )


def blob_image(seed, size=256, blob_count=6):
    """A synthetic fundus-like image and its exudate mask, as float/uint8."""
    rng = Rng(seed)
    pixels = np.empty((size, size, 3))
    pixels[:] = BACKGROUND_COLOR
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    rows = rng.split("rows").integers(size - 80, blob_count) + 40
    cols = rng.split("cols").integers(size - 80, blob_count) + 40
    radii = rng.split("radii").integers(12, blob_count) + 4
    for r0, c0, rad in zip(rows, cols, radii):
        blob = ((yy - r0) ** 2 + (xx - c0) ** 2) <= rad ** 2
        pixels[blob] = EXUDATE_COLOR
        mask[blob] = 1
    pixels = pixels + rng.split("noise").normal((size, size, 3), 0, 0.02)
    return np.clip(pixels, 0, 1).astype(np.float32), mask


def write_image_png(pixels01, path):
    """Save float [0,1] RGB pixels as an 8-bit PNG."""
    Image.fromarray(np.round(pixels01 * 255).astype(np.uint8), "RGB").save(path)


def write_mask_png(mask01, path):
    Image.fromarray(mask01.astype(np.uint8) * 255, "L").save(path)


@pytest.fixture
def synthetic_dataset(tmp_path):
    """A tiny on-disk dataset: 4 train + 2 test images with masks."""
    images = tmp_path / "images"
    masks = tmp_path / "masks"
    images.mkdir()
    masks.mkdir()
    stems = [f"img{i:02d}" for i in range(6)]
    for i, stem in enumerate(stems):
        pixels, mask = blob_image(seed=100 + i)
        write_image_png(pixels, images / f"{stem}.png")
        write_mask_png(mask, masks / f"{stem}.png")
    train_list = tmp_path / "train.txt"
    test_list = tmp_path / "test.txt"
    train_list.write_text("\n".join(stems[:4]) + "\n")
    test_list.write_text("\n".join(stems[4:]) + "\n")
    return {
        "root": tmp_path,
        "images": images,
        "masks": masks,
        "train_list": train_list,
        "test_list": test_list,
        "stems": stems,
    }
