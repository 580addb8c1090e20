"""Physical image formation: camera response curves, exposure simulation and
synthetic exposure-stack generation.

The forward model is ``I = quantize(f(clip(E * dt, 0, 1)))`` where ``f`` is a
monotone camera response curve sampled on 1024 points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DELTA_T_REF = 1.0
DORF_SAMPLES = 1024
DEFAULT_EVS = tuple(float(ev) for ev in range(-4, 5))


class DorfParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExposureMeta:
    """Exposure time relative to ``DELTA_T_REF``; EV 0 is ``dt == 1``."""

    delta_t: float
    ev_offset: float

    def __post_init__(self):
        if not (self.delta_t > 0 and math.isfinite(self.delta_t)):
            raise ValueError(f"delta_t must be positive and finite, got {self.delta_t}")

    @classmethod
    def from_ev(cls, ev: float, delta_t_ref: float = DELTA_T_REF) -> "ExposureMeta":
        ev = float(ev)
        return cls(delta_t=float(2.0**ev * delta_t_ref), ev_offset=ev)

    @classmethod
    def from_delta_t(cls, delta_t: float, delta_t_ref: float = DELTA_T_REF) -> "ExposureMeta":
        delta_t = float(delta_t)
        return cls(delta_t=delta_t, ev_offset=math.log2(delta_t / delta_t_ref))


@dataclass
class Crf:
    """Monotone response curve sampled at ``samples_x`` (sensor exposure)."""

    name: str
    samples_x: np.ndarray
    samples_b: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.samples_x, dtype=np.float64).ravel()
        b = np.asarray(self.samples_b, dtype=np.float64).ravel()
        if x.shape != b.shape or x.size < 2:
            raise ValueError(f"curve {self.name!r}: sample arrays must share a length >= 2")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(b))):
            raise ValueError(f"curve {self.name!r}: non-finite samples")
        if np.any(np.diff(x) <= 0):
            raise ValueError(f"curve {self.name!r}: exposure samples must be strictly ascending")
        if np.any(np.diff(b) < 0):
            idx = int(np.argmax(np.diff(b) < 0)) + 1
            raise ValueError(f"curve {self.name!r}: brightness decreases at index {idx}")
        if b[-1] <= b[0]:
            raise ValueError(f"curve {self.name!r}: constant brightness")
        # normalize both axes onto [0, 1]
        self.samples_x = (x - x[0]) / (x[-1] - x[0])
        self.samples_b = (b - b[0]) / (b[-1] - b[0])

    @classmethod
    def from_function(cls, name: str, fn: Callable[[np.ndarray], np.ndarray],
                      n: int = DORF_SAMPLES) -> "Crf":
        x = np.linspace(0.0, 1.0, n)
        return cls(name, x, fn(x))

    def __call__(self, x):
        return apply_crf(self, x)

    def inverse(self, b):
        return invert_crf(self, b)


def identity_crf(n: int = DORF_SAMPLES) -> Crf:
    return Crf.from_function("identity", lambda x: x, n)


def gamma_crf(gamma: float = 2.2, n: int = DORF_SAMPLES) -> Crf:
    return Crf.from_function(f"gamma-{gamma:g}", lambda x: x ** (1.0 / gamma), n)


@dataclass
class RadianceMap:
    """Linear scene irradiance, H x W x 3, arbitrary absolute scale."""

    pixels: np.ndarray
    exposure_unit: float = DELTA_T_REF
    fallback: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"radiance map must be H x W x 3, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("radiance map contains non-finite values")
        if np.any(px < 0):
            raise ValueError("radiance map contains negative values")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class LdrImage:
    pixels: np.ndarray
    meta: ExposureMeta = field(default_factory=lambda: ExposureMeta.from_ev(0.0))
    crf_name: str | None = None
    bit_depth: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"LDR image must be H x W x 3, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("LDR pixels must lie in [0, 1]")
        if self.bit_depth is not None and self.bit_depth not in (8, 16):
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def ev(self) -> float:
        return self.meta.ev_offset


@dataclass
class ExposureStack:
    images: list
    scene_id: str = "scene"

    def __post_init__(self):
        if not self.images:
            raise ValueError("exposure stack is empty")
        dts = [im.meta.delta_t for im in self.images]
        if any(b <= a for a, b in zip(dts, dts[1:])):
            raise ValueError(f"stack {self.scene_id!r}: delta_t must be strictly increasing, got {dts}")
        shape = self.images[0].shape
        crf = self.images[0].crf_name
        for im in self.images[1:]:
            if im.shape != shape:
                raise ValueError(f"stack {self.scene_id!r}: mixed image shapes {shape} vs {im.shape}")
            if im.crf_name != crf:
                raise ValueError(f"stack {self.scene_id!r}: mixed CRFs {crf!r} vs {im.crf_name!r}")

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def evs(self) -> list[float]:
        return [im.meta.ev_offset for im in self.images]

    @property
    def delta_ts(self) -> list[float]:
        return [im.meta.delta_t for im in self.images]

    @property
    def crf_name(self):
        return self.images[0].crf_name

    def at_ev(self, ev: float) -> LdrImage:
        for im in self.images:
            if math.isclose(im.meta.ev_offset, ev, abs_tol=1e-9):
                return im
        raise KeyError(f"stack {self.scene_id!r} has no image at EV {ev:+g}; EVs are {self.evs}")


# ---------------------------------------------------------------------------
# DoRF curves
# ---------------------------------------------------------------------------


def _parse_floats(line: str, name: str, what: str) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in line.split()], dtype=np.float64)
    except ValueError as exc:
        raise DorfParseError(f"curve {name!r}: bad {what} sample line ({exc})") from None
    if vals.size != DORF_SAMPLES:
        raise DorfParseError(f"curve {name!r}: expected {DORF_SAMPLES} {what} samples, got {vals.size}")
    return vals


def parse_dorf(text: str) -> list[Crf]:
    """Parse DoRF text: per curve a name line, a metadata line, then the
    irradiance (``I =``) and brightness (``B =``) sample lines. The ``I =`` /
    ``B =`` labels may sit on their own line, prefix the values, or be absent.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    curves = []
    pos = 0

    def take_samples(label: str, name: str) -> np.ndarray:
        nonlocal pos
        if pos >= len(lines):
            raise DorfParseError(f"curve {name!r}: truncated before {label} samples")
        ln = lines[pos]
        head = ln.replace(" ", "")
        if head.startswith(label + "="):
            rest = ln.split("=", 1)[1].strip()
            pos += 1
            if not rest:
                if pos >= len(lines):
                    raise DorfParseError(f"curve {name!r}: truncated before {label} samples")
                rest = lines[pos]
                pos += 1
            return _parse_floats(rest, name, label)
        pos += 1
        return _parse_floats(ln, name, label)

    while pos < len(lines):
        name = lines[pos]
        if pos + 1 >= len(lines):
            raise DorfParseError(f"curve {name!r}: missing metadata line")
        pos += 2
        xs = take_samples("I", name)
        bs = take_samples("B", name)
        try:
            curves.append(Crf(name, xs, bs))
        except ValueError as exc:
            raise DorfParseError(str(exc)) from None
    return curves


def strided_indices(n: int, count: int) -> list[int]:
    if count < 1 or count > n:
        raise ValueError(f"cannot select {count} of {n} curves")
    if count == 1:
        return [0]
    return [int(round(i * (n - 1) / (count - 1))) for i in range(count)]


def load_dorf(path, selection: int | Sequence[str] | None = None) -> list[Crf]:
    """Load curves from a DoRF text file.

    ``selection`` is a count (evenly strided picks over the file) or a list of
    curve names; either way the file order is kept.
    """
    curves = parse_dorf(Path(path).read_text())
    if not curves:
        raise DorfParseError(f"{path}: no curves found")
    if selection is None:
        return curves
    if isinstance(selection, int):
        return [curves[i] for i in strided_indices(len(curves), selection)]
    wanted = list(selection)
    names = [c.name for c in curves]
    missing = [s for s in wanted if s not in names]
    if missing:
        raise KeyError(f"curves not found in {path}: {missing}")
    return [c for c in curves if c.name in wanted]


def format_dorf(curves: Iterable[Crf], metadata: str = "graph") -> str:
    out = []
    for c in curves:
        if c.samples_x.size != DORF_SAMPLES:
            c = resample_crf(c, DORF_SAMPLES)
        out.append(c.name)
        out.append(metadata)
        out.append("I =")
        out.append("   ".join(f"{v:.6e}" for v in c.samples_x))
        out.append("B =")
        out.append("   ".join(f"{v:.6e}" for v in c.samples_b))
    return "\n".join(out) + "\n"


def write_dorf(path, curves: Iterable[Crf]) -> None:
    Path(path).write_text(format_dorf(curves))


def resample_crf(crf: Crf, n: int) -> Crf:
    x = np.linspace(0.0, 1.0, n)
    return Crf(crf.name, x, apply_crf(crf, x))


def synthetic_response_curves(n: int = 5) -> list[Crf]:
    """Parametric stand-ins for measured response curves.

    Gamma-like curves blended with a film-style toe/shoulder; a few saturate
    before full exposure so that inversion meets flat segments.
    """
    curves = []
    x = np.linspace(0.0, 1.0, DORF_SAMPLES)
    for i in range(n):
        t = i / max(n - 1, 1)
        gamma = 1.0 + 2.0 * t
        film = 0.15 + 0.5 * ((i * 7) % 5) / 4
        knee = 1.0 - 0.15 * ((i % 3) == 2)
        xs = np.clip(x / knee, 0.0, 1.0)
        base = xs ** (1.0 / gamma)
        s = 3 * xs**2 - 2 * xs**3
        b = (1 - film) * base + film * s
        curves.append(Crf(f"synthetic-{i:03d}-g{gamma:.2f}", x, b))
    return curves


def builtin_crfs() -> list[Crf]:
    """Five default curves used when no DoRF file is supplied."""
    return [gamma_crf(2.2)] + synthetic_response_curves(201)[25::50]


# ---------------------------------------------------------------------------
# Response application and inversion
# ---------------------------------------------------------------------------


def apply_crf(crf: Crf, x, return_clipped: bool = False):
    """Evaluate the response at sensor exposure ``x``; inputs outside [0, 1]
    are clipped first (saturation is part of the forward model)."""
    arr = np.asarray(x, dtype=np.float64)
    clipped = (arr < 0) | (arr > 1)
    out = np.interp(np.clip(arr, 0.0, 1.0), crf.samples_x, crf.samples_b)
    if np.ndim(x) == 0:
        out = float(out)
        clipped = bool(clipped)
    return (out, clipped) if return_clipped else out


def _inverse_tables(crf: Crf):
    cache = getattr(crf, "_inv_tables", None)
    if cache is not None and cache[0] is crf.samples_b:
        return cache[1:]
    b, x = crf.samples_b, crf.samples_x
    starts = np.flatnonzero(np.r_[True, np.diff(b) > 0])
    ends = np.r_[starts[1:] - 1, b.size - 1]
    levels = b[starts]
    x_lo, x_hi = x[starts], x[ends]
    crf._inv_tables = (crf.samples_b, levels, x_lo, x_hi)
    return levels, x_lo, x_hi


def invert_crf(crf: Crf, b):
    """Numeric inverse of the response.

    Between distinct brightness levels the inverse is linear along the
    segment the curve crosses; a brightness attained on a flat run maps to
    the midpoint of that run.
    """
    levels, x_lo, x_hi = _inverse_tables(crf)
    arr = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    idx = np.searchsorted(levels, arr, side="left")
    idx_c = np.minimum(idx, levels.size - 1)
    exact = levels[idx_c] == arr
    k = np.clip(idx - 1, 0, levels.size - 2)
    lo_b, hi_b = levels[k], levels[k + 1]
    frac = (arr - lo_b) / (hi_b - lo_b)
    between = x_hi[k] + frac * (x_lo[k + 1] - x_hi[k])
    mid = 0.5 * (x_lo[idx_c] + x_hi[idx_c])
    out = np.where(exact, mid, between)
    return float(out) if np.ndim(b) == 0 else out


def strictly_increasing_mask(crf: Crf, x) -> np.ndarray:
    """True where ``x`` falls strictly inside a segment of positive slope."""
    xs, bs = crf.samples_x, crf.samples_b
    arr = np.asarray(x, dtype=np.float64)
    k = np.clip(np.searchsorted(xs, arr, side="right") - 1, 0, xs.size - 2)
    return bs[k + 1] > bs[k]


# ---------------------------------------------------------------------------
# Exposure simulation
# ---------------------------------------------------------------------------


def quantize(v, bit_depth: int):
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    levels = (1 << bit_depth) - 1
    return np.round(np.asarray(v, dtype=np.float64) * levels) / levels


def simulate_ldr(E, meta: ExposureMeta, crf: Crf, bit_depth: int = 8) -> LdrImage:
    px = E.pixels if isinstance(E, RadianceMap) else np.asarray(E, dtype=np.float64)
    x = np.clip(px * meta.delta_t, 0.0, 1.0)
    return LdrImage(quantize(apply_crf(crf, x), bit_depth), meta, crf.name, bit_depth)


def synth_stack(E, ev_offsets: Sequence[float] = DEFAULT_EVS, crf: Crf | None = None,
                bit_depth: int = 8, scene_id: str = "scene") -> ExposureStack:
    evs = [float(e) for e in ev_offsets]
    if len(set(evs)) != len(evs):
        raise ValueError(f"duplicate EV offsets: {evs}")
    if evs != sorted(evs):
        raise ValueError(f"EV offsets must be sorted ascending: {evs}")
    crf = crf or identity_crf()
    images = [simulate_ldr(E, ExposureMeta.from_ev(ev), crf, bit_depth) for ev in evs]
    return ExposureStack(images, scene_id)


def synthetic_radiance(height: int = 64, width: int = 64, seed: int = 0,
                       stops: float = 8.0) -> RadianceMap:
    """A smooth test scene spanning roughly ``stops`` stops around 0.5.

    Log-radiance is a random low-frequency field (a few oriented sinusoids
    plus a couple of bright blobs), so every pixel is unclipped in some
    exposure of a -4..+4 bracket when ``stops <= 8``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    field_ = np.zeros((height, width))
    for _ in range(4):
        fx, fy = rng.uniform(-3, 3, size=2)
        field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    for _ in range(2):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.05, 0.15)
        field_ += 3.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12) - 0.5
    log2_lum = field_ * stops - 1.0
    tint = rng.uniform(0.6, 1.0, size=3)
    chroma = 1.0 + 0.15 * np.stack(
        [np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2) + c)) for c in rng.uniform(0, 1, 3)], axis=-1)
    pixels = (2.0 ** log2_lum)[..., None] * tint * chroma
    return RadianceMap(pixels)


def synth_dataset(hdr_dir, crfs: Sequence[Crf], ev_offsets: Sequence[float] = DEFAULT_EVS,
                  out_dir=".", bit_depth: int = 8):
    """Render every (HDR scene x curve) pair into an LDR stack on disk.

    Returns the manifest rows; the manifest itself is written to
    ``out_dir/manifest.tsv``.
    """
    from . import io

    hdr_dir, out_dir = Path(hdr_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(p for p in hdr_dir.iterdir() if p.suffix.lower() in io.HDR_EXTENSIONS)
    rows = []
    for src in sources:
        try:
            E = RadianceMap(io.read_hdr(src))
        except (io.CodecError, ValueError) as exc:
            logger.warning("skipping unreadable HDR %s: %s", src, exc)
            continue
        for crf in crfs:
            scene_id = f"{src.stem}__{crf.name}"
            stack = synth_stack(E, ev_offsets, crf, bit_depth, scene_id)
            for im in stack:
                path = out_dir / f"{scene_id}_ev{im.meta.ev_offset:+.2f}.png"
                io.write_ldr(path, im.pixels, bit_depth)
                rows.append(io.ManifestRow(scene_id, crf.name, im.meta.ev_offset,
                                           path.name, bit_depth))
    if not rows:
        raise RuntimeError(f"no stacks synthesized from {hdr_dir}")
    io.write_manifest(out_dir / "manifest.tsv", rows)
    return rows
