"""Single-image bracket synthesis at arbitrary EV offsets."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .imaging import ExposureMeta, ExposureStack, LdrImage
from .masking import MaskConfig, apply_mask, well_exposed_mask
from .model import DOWN, UP, BracketNet, _to_tensor, to_image


def _as_ldr(img) -> LdrImage:
    if isinstance(img, LdrImage):
        return img
    return LdrImage(np.asarray(img, dtype=np.float64))


def route(ev_in: float, ev_out: float) -> str | None:
    """Which exposure net produces ``ev_out`` from ``ev_in`` (None = identity)."""
    if ev_out > ev_in:
        return UP
    if ev_out < ev_in:
        return DOWN
    return None


@torch.no_grad()
def generate_exposure(model: BracketNet, img, ev_out: float,
                      mask_cfg: MaskConfig = MaskConfig()) -> LdrImage:
    """Re-expose ``img`` to ``ev_out``; the input's EV defaults to 0."""
    img = _as_ldr(img)
    ev_in = img.meta.ev_offset
    direction = route(ev_in, ev_out)
    target = ExposureMeta.from_ev(ev_out)
    if direction is None:
        return LdrImage(img.pixels.copy(), target, img.crf_name, img.bit_depth)
    model.eval()
    masked = apply_mask(img.pixels, well_exposed_mask(img.pixels, mask_cfg))
    latent = model.encode(_to_tensor(masked))
    ratio = 2.0 ** (float(ev_out) - ev_in)
    out = model.expose(latent * ratio, direction)
    return LdrImage(np.clip(to_image(out), 0.0, 1.0), target, img.crf_name)


@torch.no_grad()
def generate_stack(model: BracketNet, img, ev_offsets: Sequence[float] = (-2, -1, 0, 1, 2),
                   mask_cfg: MaskConfig = MaskConfig(), scene_id: str = "scene") -> ExposureStack:
    """One generated image per EV; the input itself is used at its own EV.

    The encoder runs once and its latent is reused for every target EV.
    """
    evs = [float(e) for e in ev_offsets]
    if len(set(evs)) != len(evs):
        raise ValueError(f"duplicate EV offsets: {evs}")
    if evs != sorted(evs):
        raise ValueError(f"EV offsets must be sorted ascending: {evs}")
    img = _as_ldr(img)
    ev_in = img.meta.ev_offset
    model.eval()
    masked = apply_mask(img.pixels, well_exposed_mask(img.pixels, mask_cfg))
    latent = model.encode(_to_tensor(masked))
    images = []
    for ev in evs:
        direction = route(ev_in, ev)
        meta = ExposureMeta.from_ev(ev)
        if direction is None:
            images.append(LdrImage(img.pixels.copy(), meta, img.crf_name, img.bit_depth))
            continue
        out = model.expose(latent * 2.0 ** (ev - ev_in), direction)
        images.append(LdrImage(np.clip(to_image(out), 0.0, 1.0), meta, img.crf_name))
    return ExposureStack(images, scene_id)
