"""Merging exposure brackets into radiance maps and global tone mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Crf, ExposureStack, LdrImage, RadianceMap, invert_crf
from .masking import LUMA_WEIGHTS

DEBEVEC = "debevec-weighted"
ROBERTSON = "robertson-ml"
METHODS = (DEBEVEC, ROBERTSON)

LOG_DELTA = 1e-6


@dataclass(frozen=True)
class MergeConfig:
    method: str = DEBEVEC
    saturation_epsilon: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; choose from {METHODS}")
        if self.saturation_epsilon < 0:
            raise ValueError("saturation_epsilon must be nonnegative")


def hat_weight(z, saturation_epsilon: float = 0.0):
    """Triangle weight ``2 * min(z, 1 - z)``, zero at both ends.

    Weights not above ``saturation_epsilon`` are treated as zero.
    """
    w = 2.0 * np.minimum(z, 1.0 - z)
    w = np.clip(w, 0.0, 1.0)
    return np.where(w > saturation_epsilon, w, 0.0)


def _inverse(inv_crf, z):
    if inv_crf is None:
        return z
    if isinstance(inv_crf, Crf):
        return invert_crf(inv_crf, z)
    return inv_crf(z)


def merge(stack: ExposureStack, inv_crf=None, cfg: MergeConfig = MergeConfig()) -> RadianceMap:
    """Weighted merge of a bracket with a known response.

    ``inv_crf`` is a Crf (inverted numerically), a callable mapping brightness
    to sensor exposure, or None for already-linear images. Pixels whose
    weights vanish in every exposure fall back to the shortest exposure when
    saturated, the longest otherwise; they are flagged in ``.fallback``.
    """
    if len(stack) < 2:
        raise ValueError("merging needs at least two exposures")
    shape = stack[0].shape
    if any(im.shape != shape for im in stack):
        raise ValueError("stack images have inconsistent shapes")
    z = np.stack([im.pixels for im in stack])
    dts = np.array(stack.delta_ts).reshape(-1, 1, 1, 1)
    x = np.maximum(_inverse(inv_crf, z), 0.0)
    w = hat_weight(z, cfg.saturation_epsilon)
    wsum = w.sum(axis=0)
    valid = wsum > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if cfg.method == DEBEVEC:
            log_e = np.log(np.maximum(x, 1e-300)) - np.log(dts)
            merged = np.exp((w * log_e).sum(axis=0) / np.where(valid, wsum, 1.0))
        else:
            num = (w * x * dts).sum(axis=0)
            den = (w * dts**2).sum(axis=0)
            merged = num / np.where(den > 0, den, 1.0)
    saturated = z.mean(axis=0) >= 0.5
    short_est = x[0] / dts[0]
    long_est = x[-1] / dts[-1]
    fallback = np.where(saturated, short_est, long_est)
    merged = np.where(valid, merged, fallback)
    return RadianceMap(np.nan_to_num(merged, nan=0.0, posinf=0.0), fallback=~valid)


@dataclass(frozen=True)
class TonemapParams:
    key_a: float = 0.18
    l_white: float | None = None  # None -> max scaled luminance

    def __post_init__(self):
        if not self.key_a > 0:
            raise ValueError("key_a must be positive")
        if self.l_white is not None and not self.l_white > 0:
            raise ValueError("l_white must be positive")


def reinhard_curve(l_m, l_white=np.inf):
    """Global Reinhard operator on scaled luminance."""
    l_m = np.asarray(l_m, dtype=np.float64)
    burn = 0.0 if np.isinf(l_white) else l_m / (l_white**2)
    return l_m * (1.0 + burn) / (1.0 + l_m)


def tonemap_reinhard(E, p: TonemapParams = TonemapParams()) -> LdrImage:
    px = E.pixels if isinstance(E, RadianceMap) else np.asarray(E, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 radiance, got {px.shape}")
    if np.any(px < 0):
        raise ValueError("radiance must be nonnegative")
    lum = px @ LUMA_WEIGHTS
    log_avg = np.exp(np.mean(np.log(lum + LOG_DELTA)))
    l_m = p.key_a * lum / log_avg
    l_white = p.l_white if p.l_white is not None else max(float(l_m.max()), LOG_DELTA)
    l_d = reinhard_curve(l_m, l_white)
    ratio = np.divide(l_d, lum, out=np.zeros_like(lum), where=lum > 0)
    out = np.clip(px * ratio[..., None], 0.0, 1.0)
    return LdrImage(out)
