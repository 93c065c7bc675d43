"""Image, depth and feature-map file formats.

Depth maps are 16-bit PNG in millimeters or PFM in meters. Feature maps are a
raw little-endian blob behind a 16-byte header::

    magic b"FEAT" | H uint32 | W uint32 | F uint16 | dtype uint16

with dtype code 0 = float32, 1 = float16.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
FEAT_MAGIC = b"FEAT"
_FEAT_DTYPES = {0: "<f4", 1: "<f2"}
_FEAT_CODES = {np.dtype("float32"): 0, np.dtype("float16"): 1}


class FileFormatError(ValueError):
    """Malformed input file; the message names the path and byte offset."""

    def __init__(self, path, offset: int, what: str):
        self.path, self.offset = str(path), offset
        super().__init__(f"{path}: {what} (byte offset {offset})")


def _check_png(path: Path, raw: bytes) -> None:
    for i, (a, b) in enumerate(zip(raw[:8], PNG_SIGNATURE)):
        if a != b:
            raise FileFormatError(path, i, "bad PNG signature")
    if len(raw) < 8:
        raise FileFormatError(path, len(raw), "truncated PNG signature")


def read_png(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    _check_png(path, raw)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L"):
                return np.array(im, dtype=np.uint16)
            if im.mode == "I":
                return np.array(im).astype(np.uint16)
            return np.array(im)
    except OSError as exc:
        raise FileFormatError(path, 8, f"corrupt PNG stream: {exc}") from exc


def write_png8(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def write_png16(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint16))
    Image.fromarray(img).save(path, format="PNG")  # uint16 maps to I;16


def read_image(path) -> np.ndarray:
    """8-bit RGB image as float64 in [0, 1], (H, W, 3)."""
    img = read_png(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3].astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    color = data.ndim == 3
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    lines, pos = [], 0
    for _ in range(3):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FileFormatError(path, pos, "truncated PFM header")
        lines.append((pos, raw[pos:end].decode("ascii", "replace").strip()))
        pos = end + 1
    (o0, magic), (o1, dims), (o2, scale_s) = lines
    if magic not in ("Pf", "PF"):
        raise FileFormatError(path, o0, f"bad PFM magic {magic!r}")
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise FileFormatError(path, o1, f"bad PFM dimensions {dims!r}") from None
    try:
        scale = float(scale_s)
    except ValueError:
        raise FileFormatError(path, o2, f"bad PFM scale {scale_s!r}") from None
    ch = 3 if magic == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * ch * 4
    if len(raw) - pos < need:
        raise FileFormatError(path, len(raw), f"PFM payload truncated, expected {need} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=w * h * ch, offset=pos)
    data = data.reshape((h, w, ch) if ch == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


def read_depth(path) -> np.ndarray:
    """Depth in meters (0 = invalid)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        d = read_pfm(path)
    else:
        img = read_png(path)
        if img.dtype != np.uint16:
            raise FileFormatError(path, 25, "depth PNG must be 16-bit")
        d = img.astype(np.float64) / 1000.0
    d = np.where(np.isfinite(d) & (d > 0), d, 0.0)
    return d


def write_depth(path, depth: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, depth)
    else:
        write_png16(path, np.clip(np.round(np.asarray(depth) * 1000), 0, 65535))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def write_features(path, feat: np.ndarray, dtype="float32") -> None:
    feat = np.asarray(feat)
    h, w, f = feat.shape
    dt = np.dtype(dtype)
    if dt not in _FEAT_CODES:
        raise ValueError(f"feature dtype must be float32 or float16, got {dt}")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<IIHH", h, w, f, _FEAT_CODES[dt]))
        fh.write(feat.astype(dt.newbyteorder("<")).tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FileFormatError(path, len(raw), "truncated feature header")
    if raw[:4] != FEAT_MAGIC:
        off = next(i for i in range(4) if raw[i] != FEAT_MAGIC[i])
        raise FileFormatError(path, off, "bad feature magic")
    h, w, f, code = struct.unpack("<IIHH", raw[4:16])
    if code not in _FEAT_DTYPES:
        raise FileFormatError(path, 14, f"unknown feature dtype code {code}")
    dt = np.dtype(_FEAT_DTYPES[code])
    need = h * w * f * dt.itemsize
    if len(raw) - 16 != need:
        raise FileFormatError(path, 16, f"payload is {len(raw) - 16} bytes, header implies {need}")
    return np.frombuffer(raw, dtype=dt, offset=16).reshape(h, w, f).astype(np.float64)


def read_mask(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 3:
        img = img[..., 0]
    return img > 127


def write_mask(path, mask: np.ndarray) -> None:
    write_png8(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
