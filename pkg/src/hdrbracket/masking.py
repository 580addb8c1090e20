"""Soft well-exposedness masks applied to encoder inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

PAPER_LITERAL_MAX = "paper-literal-max"
MIN_COMBINATION = "min-combination"
VARIANTS = (PAPER_LITERAL_MAX, MIN_COMBINATION)


@dataclass(frozen=True)
class MaskConfig:
    """``gamma`` is the under/over-exposure threshold.

    ``min-combination`` zeroes both extremes; ``paper-literal-max`` combines the
    two ramps with ``max`` and therefore equals 1 at Y = 0 and Y = 1.
    """

    gamma: float = 0.05
    variant: str = MIN_COMBINATION

    def __post_init__(self):
        if not 0 < self.gamma < 0.5:
            raise ValueError(f"mask gamma must lie in (0, 0.5), got {self.gamma}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown mask variant {self.variant!r}; choose from {VARIANTS}")


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA_WEIGHTS


def mask_from_luma(y, cfg: MaskConfig = MaskConfig()):
    y = np.asarray(y, dtype=np.float64)
    g = cfg.gamma
    lam1 = 1.0 - np.maximum(0.0, (1.0 - g) - y) / (1.0 - g)
    lam2 = 1.0 - np.maximum(0.0, y - g) / (1.0 - g)
    combine = np.maximum if cfg.variant == PAPER_LITERAL_MAX else np.minimum
    return np.clip(combine(lam1, lam2), 0.0, 1.0)


def well_exposed_mask(img, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    """H x W soft weights from the image's luma (1 = well exposed)."""
    pixels = getattr(img, "pixels", img)
    return mask_from_luma(luma(pixels), cfg)


def apply_mask(img, mask) -> np.ndarray:
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != pixels.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {pixels.shape[:2]}")
    return pixels * mask[..., None]
