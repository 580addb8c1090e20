"""File codecs (Radiance RGBE, PFM, PNG) and the stack manifest format."""

from __future__ import annotations

import csv
import re
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import cv2
import numpy as np

HDR_EXTENSIONS = (".hdr", ".pic", ".pfm")
LDR_EXTENSIONS = (".png",)
MANIFEST_MAGIC = "# hdrbracket-manifest v1"


class CodecError(IOError):
    pass


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    parts = []
    pos = 0
    # header: type, "width height", scale -- whitespace separated
    while len(parts) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise CodecError(f"{path}: truncated PFM header")
        parts.append(m.group(1))
        pos = m.end()
    pos += 1  # single whitespace byte terminates the header
    kind, w, h, scale = parts
    if kind not in (b"PF", b"Pf"):
        raise CodecError(f"{path}: not a PFM file (magic {kind!r})")
    try:
        width, height, scale = int(w), int(h), float(scale)
    except ValueError:
        raise CodecError(f"{path}: malformed PFM header") from None
    channels = 3 if kind == b"PF" else 1
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    if len(data) - pos < count * 4:
        raise CodecError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    arr = arr.reshape(height, width, channels)[::-1].astype(np.float32)
    return arr if channels == 3 else arr[..., 0]


def write_pfm(path, img, little_endian: bool = True) -> None:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        kind = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = b"PF"
    else:
        raise CodecError(f"{path}: PFM needs H x W or H x W x 3, got {arr.shape}")
    h, w = arr.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    payload = np.ascontiguousarray(arr[::-1]).astype(dtype).tobytes()
    Path(path).write_bytes(kind + b"\n" + f"{w} {h}".encode() + b"\n" + scale + b"\n" + payload)


# ---------------------------------------------------------------------------
# Radiance RGBE
# ---------------------------------------------------------------------------


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v >= 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, v, 1.0), 0.0)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    return (rgbe[..., :3].astype(np.float64) * f[..., None]).astype(np.float32)


def _read_rle_scanline(buf: memoryview, pos: int, width: int, path) -> tuple[np.ndarray, int]:
    line = np.empty((4, width), dtype=np.uint8)
    for c in range(4):
        x = 0
        while x < width:
            if pos >= len(buf):
                raise CodecError(f"{path}: truncated RGBE scanline")
            n = buf[pos]
            pos += 1
            if n > 128:
                n -= 128
                if x + n > width or pos >= len(buf):
                    raise CodecError(f"{path}: bad RGBE run length")
                line[c, x:x + n] = buf[pos]
                pos += 1
            else:
                if n == 0 or x + n > width or pos + n > len(buf):
                    raise CodecError(f"{path}: bad RGBE literal run")
                line[c, x:x + n] = np.frombuffer(buf[pos:pos + n], dtype=np.uint8)
                pos += n
            x += n
    return line.T, pos


def read_rgbe(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise CodecError(f"{path}: not a Radiance RGBE file")
    pos = 0
    fmt = None
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise CodecError(f"{path}: truncated RGBE header")
        line = data[pos:end].strip()
        pos = end + 1
        if not line:
            break
        if line.startswith(b"FORMAT="):
            fmt = line[7:]
    if fmt not in (None, b"32-bit_rle_rgbe"):
        raise CodecError(f"{path}: unsupported RGBE format {fmt!r}")
    end = data.find(b"\n", pos)
    if end < 0:
        raise CodecError(f"{path}: missing RGBE resolution line")
    m = re.fullmatch(rb"-Y (\d+) \+X (\d+)", data[pos:end].strip())
    if m is None:
        raise CodecError(f"{path}: unsupported RGBE orientation {data[pos:end]!r}")
    height, width = int(m.group(1)), int(m.group(2))
    pos = end + 1
    buf = memoryview(data)
    out = np.empty((height, width, 4), dtype=np.uint8)
    for y in range(height):
        if (8 <= width < 32768 and pos + 4 <= len(buf) and buf[pos] == 2 and buf[pos + 1] == 2
                and (buf[pos + 2] << 8 | buf[pos + 3]) == width):
            out[y], pos = _read_rle_scanline(buf, pos + 4, width, path)
        else:
            n = width * 4
            if pos + n > len(buf):
                raise CodecError(f"{path}: truncated RGBE pixel data")
            out[y] = np.frombuffer(buf[pos:pos + n], dtype=np.uint8).reshape(width, 4)
            pos += n
    return rgbe_to_float(out)


def write_rgbe(path, img) -> None:
    """Write flat (uncompressed) RGBE scanlines; readers accept both forms."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise CodecError(f"{path}: RGBE needs H x W x 3, got {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise CodecError(f"{path}: RGBE needs finite nonnegative values")
    h, w = arr.shape[:2]
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {h} +X {w}\n".encode()
    Path(path).write_bytes(header + float_to_rgbe(arr).tobytes())


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def read_hdr(path) -> np.ndarray:
    path = Path(path)
    ext = path.suffix.lower()
    if not path.exists():
        raise CodecError(f"{path}: no such file")
    if ext == ".pfm":
        arr = read_pfm(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return arr
    if ext in (".hdr", ".pic"):
        return read_rgbe(path)
    raise CodecError(f"{path}: unsupported HDR extension {ext!r}")


def write_hdr(path, img) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pfm":
        write_pfm(path, img)
    elif ext in (".hdr", ".pic"):
        write_rgbe(path, img)
    else:
        raise CodecError(f"{path}: unsupported HDR extension {ext!r}")


def read_ldr(path) -> tuple[np.ndarray, int]:
    """Read an 8/16-bit PNG as RGB floats in [0, 1]; returns (pixels, bit_depth)."""
    path = Path(path)
    if path.suffix.lower() not in LDR_EXTENSIONS:
        raise CodecError(f"{path}: unsupported LDR extension {path.suffix!r}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise CodecError(f"{path}: unreadable PNG")
    if raw.dtype == np.uint8:
        bits = 8
    elif raw.dtype == np.uint16:
        bits = 16
    else:
        raise CodecError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[..., :3]
    rgb = raw[..., ::-1].astype(np.float64) / ((1 << bits) - 1)
    return rgb, bits


def write_ldr(path, img, bit_depth: int = 8) -> None:
    path = Path(path)
    if path.suffix.lower() not in LDR_EXTENSIONS:
        raise CodecError(f"{path}: unsupported LDR extension {path.suffix!r}")
    if bit_depth not in (8, 16):
        raise CodecError(f"{path}: bit depth must be 8 or 16")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    levels = (1 << bit_depth) - 1
    q = np.round(arr * levels).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), q):
        raise CodecError(f"{path}: PNG write failed")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    scene_id: str
    crf_name: str
    ev: float
    path: str
    bit_depth: int


_MANIFEST_FIELDS = [f.name for f in fields(ManifestRow)]


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(MANIFEST_MAGIC + "\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(_MANIFEST_FIELDS)
        for r in rows:
            scene, crf, ev, p, bits = astuple(r)
            writer.writerow([scene, crf if crf is not None else "", f"{ev:+.6g}", p, bits])


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_MAGIC:
            raise CodecError(f"{path}: missing manifest header {MANIFEST_MAGIC!r}")
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != _MANIFEST_FIELDS:
            raise CodecError(f"{path}: manifest columns {header} != {_MANIFEST_FIELDS}")
        rows = []
        for lineno, rec in enumerate(reader, start=3):
            if len(rec) != len(_MANIFEST_FIELDS):
                raise CodecError(f"{path}:{lineno}: expected {len(_MANIFEST_FIELDS)} fields")
            rows.append(ManifestRow(rec[0], rec[1] or None, float(rec[2]), rec[3], int(rec[4])))
    return rows


def load_stacks(manifest_path):
    """Group manifest rows into ExposureStacks (paths resolved against the manifest dir)."""
    from .imaging import ExposureMeta, ExposureStack, LdrImage

    manifest_path = Path(manifest_path)
    groups: dict[str, list[ManifestRow]] = {}
    for r in read_manifest(manifest_path):
        groups.setdefault(r.scene_id, []).append(r)
    stacks = []
    for scene_id, rows in groups.items():
        images = []
        for r in sorted(rows, key=lambda r: r.ev):
            pixels, bits = read_ldr(manifest_path.parent / r.path)
            images.append(LdrImage(pixels, ExposureMeta.from_ev(r.ev), r.crf_name, bits))
        stacks.append(ExposureStack(images, scene_id))
    return stacks
