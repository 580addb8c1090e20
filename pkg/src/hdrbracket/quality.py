"""Image-quality metrics and the bracket / HDR evaluation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .hdr import TonemapParams, tonemap_reinhard
from .imaging import ExposureStack
from .masking import LUMA_WEIGHTS

PSNR_CAP = 99.0


def _pixels(a):
    return np.asarray(getattr(a, "pixels", a), dtype=np.float64)


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_channel(a, b, win, c1, c2):
    def filt(x):
        # separable "valid" correlation
        x = ndimage.correlate1d(x, win, axis=0, mode="constant")
        x = ndimage.correlate1d(x, win, axis=1, mode="constant")
        r = len(win) // 2
        return x[r:x.shape[0] - r, r:x.shape[1] - r]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window; multichannel inputs average the
    per-channel scores. Only windows fully inside the image are used."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < window:
        raise ValueError(f"ssim: image {a.shape[:2]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    if a.ndim == 2:
        return _ssim_channel(a, b, win, c1, c2)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2) for c in range(a.shape[2])]))


@dataclass
class MetricRow:
    scene_id: str
    ev: float
    psnr: float
    ssim: float


def evaluate_stacks(pred: ExposureStack, ref: ExposureStack, extra: dict[str, Callable] | None = None):
    """PSNR/SSIM per EV between a generated and a reference bracket.

    ``extra`` maps names to further metric callables ``f(pred, ref) -> float``
    (e.g. a learned perceptual metric) whose values are attached to each row.
    """
    pe, re_ = [round(e, 9) for e in pred.evs], [round(e, 9) for e in ref.evs]
    if pe != re_:
        raise ValueError(f"EV mismatch: predicted {pred.evs} vs reference {ref.evs}")
    rows = []
    for p, r in zip(pred, ref):
        row = MetricRow(ref.scene_id, r.meta.ev_offset, psnr(p, r), ssim(p, r))
        for name, fn in (extra or {}).items():
            setattr(row, name, float(fn(p.pixels, r.pixels)))
        rows.append(row)
    return rows


def normalize_pair(pred_hdr, ref_hdr, percentile: float = 99.9):
    """Divide both maps by the reference's ``percentile`` luminance."""
    p, r = _pixels(pred_hdr), _pixels(ref_hdr)
    scale = float(np.percentile(r @ LUMA_WEIGHTS, percentile))
    if scale <= 0:
        scale = 1.0
    return p / scale, r / scale


@dataclass
class HdrMetrics:
    tm_psnr: float
    tm_ssim: float
    hdr_psnr: float

    def as_dict(self):
        return {"tm_psnr": self.tm_psnr, "tm_ssim": self.tm_ssim, "hdr_psnr": self.hdr_psnr}


def evaluate_hdr(pred_hdr, ref_hdr, tmo: TonemapParams = TonemapParams()) -> HdrMetrics:
    """Metrics on tone-mapped versions of both maps plus a linear-domain
    PSNR after joint normalization."""
    p, r = _pixels(pred_hdr), _pixels(ref_hdr)
    if p.shape != r.shape:
        raise ValueError(f"evaluate_hdr: shape mismatch {p.shape} vs {r.shape}")
    tp, tr = tonemap_reinhard(p, tmo), tonemap_reinhard(r, tmo)
    np_, nr = normalize_pair(p, r)
    return HdrMetrics(psnr(tp, tr), ssim(tp, tr), psnr(np_, nr))


def summarize(rows) -> dict[float, dict[str, float]]:
    """Mean PSNR/SSIM per EV across scenes."""
    out: dict[float, list] = {}
    for r in rows:
        out.setdefault(r.ev, []).append(r)
    return {ev: {"psnr": float(np.mean([r.psnr for r in rs])), "ssim": float(np.mean([r.ssim for r in rs])),
                 "n": len(rs)} for ev, rs in sorted(out.items())}


def format_rows(rows) -> str:
    lines = ["scene_id\tev\tpsnr\tssim"]
    lines += [f"{r.scene_id}\t{r.ev:+.2f}\t{r.psnr:.4f}\t{r.ssim:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
