"""Whole-image prediction by sliding-window patch classification.

A 256x256 image dissolves into one 32x32 patch per valid center
(rows/cols 16..239, 50176 patches), each patch is classified, and the
class decisions reassemble row-major into a 224x224 mask anchored at
image coordinate (16, 16). Padded mode zero-pads the image by 16 on all
sides first so every one of the 256x256 pixels gets a prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .dataset import (
    CENTER_LO,
    PATCH_HALF,
    PATCH_SIZE,
    VALID_SIDE,
    WORKING_SIZE,
    FundusImage,
)
from .errors import ShapeError
from .model import Model
from .training import softmax

HIGHLIGHT_RGB = (255, 0, 0)


@dataclass
class PredictionMask:
    """Binary prediction plus the exudate probability map behind it.

    ``origin`` maps mask (0, 0) to resized-image coordinates: (16, 16)
    in valid mode, (0, 0) in padded mode. The binary mask is exactly the
    probability map thresholded at 0.5 (argmax with ties to background).
    """

    pixels: np.ndarray        # [S, S] uint8 in {0, 1}
    probabilities: np.ndarray  # [S, S] float64, exudate softmax output
    mode: str
    origin: tuple[int, int]

    def __post_init__(self):
        if self.pixels.shape != self.probabilities.shape:
            raise ShapeError("mask and probability extents differ")


def predict_image(img: FundusImage, model: Model, mode: str = "valid",
                  batch: int = 512) -> PredictionMask:
    """Classify every patch center of a resized image.

    Args:
        img: 256x256x3 FundusImage.
        model: trained Model; run in inference mode (pure, batch-stable).
        mode: "valid" (224x224 output, no padding) or "padded"
            (zero-pad by 16, 256x256 output).
        batch: patches per forward pass; has no effect on the result.
    """
    if img.pixels.shape != (WORKING_SIZE, WORKING_SIZE, 3):
        raise ShapeError(
            f"predict_image expects a {WORKING_SIZE}x{WORKING_SIZE}x3 image, "
            f"got {img.pixels.shape}"
        )
    if mode not in ("valid", "padded"):
        raise ValueError(f"mode must be 'valid' or 'padded', got {mode!r}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")

    if mode == "valid":
        base = img.pixels
        side = VALID_SIDE
        origin = (CENTER_LO, CENTER_LO)
    else:
        base = np.pad(img.pixels,
                      ((PATCH_HALF, PATCH_HALF), (PATCH_HALF, PATCH_HALF), (0, 0)))
        side = WORKING_SIZE
        origin = (0, 0)

    # window top-left (i, j) holds the patch centered at (i+16, j+16)
    windows = np.lib.stride_tricks.sliding_window_view(
        base, (PATCH_SIZE, PATCH_SIZE), axis=(0, 1)
    )  # [H-31, W-31, 3, 32, 32]

    probs = np.empty(side * side, dtype=np.float64)
    flat = np.arange(side * side)
    for start in range(0, side * side, batch):
        idx = flat[start : start + batch]
        rows = idx // side
        cols = idx % side
        patches = windows[rows, cols].transpose(0, 2, 3, 1)  # [B, 32, 32, 3]
        logits = model.forward(np.ascontiguousarray(patches), training=False)
        probs[idx] = softmax(logits)[:, 1]

    prob_map = probs.reshape(side, side)
    mask = (prob_map > 0.5).astype(np.uint8)  # argmax; ties -> background
    return PredictionMask(pixels=mask, probabilities=prob_map,
                          mode=mode, origin=origin)


def write_mask(pm: PredictionMask, path) -> None:
    """Write the binary mask as an 8-bit grayscale PNG (0 or 255)."""
    Image.fromarray(pm.pixels * np.uint8(255), mode="L").save(path, format="PNG")


def write_probability(pm: PredictionMask, path) -> None:
    """Write the exudate probability map as an 8-bit grayscale PNG."""
    quantized = np.round(pm.probabilities * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path, format="PNG")


def overlay(img: FundusImage, pm: PredictionMask, path) -> None:
    """Paint predicted exudate pixels in the highlight color over the image.

    Valid-mode overlays use the 224x224 crop the mask covers; padded-mode
    overlays use the full image.
    """
    if img.pixels.shape != (WORKING_SIZE, WORKING_SIZE, 3):
        raise ShapeError(
            f"overlay expects a {WORKING_SIZE}x{WORKING_SIZE}x3 image, "
            f"got {img.pixels.shape}"
        )
    r0, c0 = pm.origin
    side = pm.pixels.shape[0]
    base = img.pixels[r0 : r0 + side, c0 : c0 + side]
    canvas = np.round(base * 255.0).astype(np.uint8).copy()
    canvas[pm.pixels == 1] = HIGHLIGHT_RGB
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Read a mask PNG written by write_mask back to {0, 1} uint8."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return (gray >= 128).astype(np.uint8)
