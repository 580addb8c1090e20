"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .imaging import ExposureMeta, ExposureStack, LdrImage, RadianceMap


def check_image(img, name: str = "image") -> LdrImage:
    """Coerce to an LdrImage; integer arrays are scaled by their dtype range."""
    if isinstance(img, LdrImage):
        return img
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    elif arr.dtype == np.uint16:
        arr = arr / 65535.0
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected H x W x 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name}: values must lie in [0, 1] (got [{arr.min():g}, {arr.max():g}])")
    return LdrImage(arr, ExposureMeta.from_ev(0.0))


def check_radiance(E, name: str = "radiance") -> RadianceMap:
    if isinstance(E, RadianceMap):
        return E
    try:
        return RadianceMap(np.asarray(E, dtype=np.float64))
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from None


def check_ev_offsets(evs) -> list[float]:
    out = [float(e) for e in np.atleast_1d(evs)]
    if not out:
        raise ValueError("at least one EV offset is required")
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate EV offsets: {out}")
    if out != sorted(out):
        raise ValueError(f"EV offsets must be sorted ascending: {out}")
    return out


def check_stacks(X, min_len: int = 1) -> list[ExposureStack]:
    if isinstance(X, ExposureStack):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("no exposure stacks given")
    for i, s in enumerate(X):
        if not isinstance(s, ExposureStack):
            raise TypeError(f"item {i}: expected ExposureStack, got {type(s).__name__}")
        if len(s) < min_len:
            raise ValueError(f"stack {s.scene_id!r} has {len(s)} images; need at least {min_len}")
    return X


def reference_image(item) -> LdrImage:
    """The image a generator should start from: stacks contribute their EV-0
    member (or the middle one when EV 0 is absent)."""
    if isinstance(item, ExposureStack):
        try:
            return item.at_ev(0.0)
        except KeyError:
            return item[len(item) // 2]
    return check_image(item)
