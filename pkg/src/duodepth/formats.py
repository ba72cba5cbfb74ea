"""Disparity file formats and dataset manifests.

PFM follows the Middlebury convention: 'Pf' header, bottom-up rows,
negative scale marking little-endian floats, NaN marking invalid pixels.
16-bit PNG follows the KITTI convention: stored value = round(d * 256),
0 marking invalid.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .errors import EncodingError, FormatError


def write_pfm(disp: np.ndarray, path) -> None:
    """Write a 2-D float map as grayscale PFM (float32, little-endian)."""
    disp = np.asarray(disp)
    if disp.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-D map, got shape {disp.shape}")
    h, w = disp.shape
    data = np.flipud(disp.astype(np.float32))
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(data.astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file. Returns the map with NaN = invalid."""
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0

    def _token():
        nonlocal offset
        while offset < len(raw) and raw[offset : offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(raw) and not raw[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError("unexpected end of header", offset=start)
        return raw[start:offset]

    magic = _token()
    if magic == b"PF":
        raise FormatError("color PFM not supported, expected grayscale 'Pf'", offset=0)
    if magic != b"Pf":
        raise FormatError(f"bad magic {magic!r}, expected 'Pf'", offset=0)
    try:
        w = int(_token())
        h = int(_token())
    except ValueError:
        raise FormatError("dimensions are not integers", offset=offset) from None
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive dimensions {w}x{h}", offset=offset)
    try:
        scale = float(_token())
    except ValueError:
        raise FormatError("scale is not a float", offset=offset) from None
    if scale == 0:
        raise FormatError("zero scale", offset=offset)
    offset += 1  # single whitespace byte after the scale line
    payload = raw[offset:]
    need = w * h * 4
    if len(payload) < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(payload)}", offset=offset + len(payload)
        )
    endian = "<" if scale < 0 else ">"
    data = np.frombuffer(payload[:need], dtype=f"{endian}f4").reshape(h, w)
    return np.flipud(data).astype(np.float32).copy()


def write_disp_png16(disp: np.ndarray, path) -> None:
    """Encode disparity as 16-bit PNG, value = round(d * 256), 0 = invalid.

    NaN entries encode as 0 (invalid). Finite negatives are an error.
    """
    disp = np.asarray(disp, dtype=np.float64)
    finite = np.isfinite(disp)
    if np.any(disp[finite] < 0):
        raise EncodingError("negative disparity cannot be PNG16-encoded")
    stored = np.zeros(disp.shape, dtype=np.int64)
    stored[finite] = np.round(disp[finite] * 256.0).astype(np.int64)
    if stored.max(initial=0) > 65535:
        raise EncodingError(f"disparity {disp[finite].max():.3f} exceeds PNG16 range (< 256 required)")
    Image.fromarray(stored.astype(np.uint16)).save(path)


def read_disp_png16(path) -> np.ndarray:
    """Decode a 16-bit disparity PNG. Invalid (stored 0) pixels become NaN."""
    arr = np.array(Image.open(path))
    if arr.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit grayscale PNG, got dtype {arr.dtype}")
    disp = arr.astype(np.float32) / 256.0
    disp[arr == 0] = np.nan
    return disp


def save_image_png(img: np.ndarray, path) -> None:
    """Save an H x W x 3 float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.float32) / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


def load_mask_png(path) -> np.ndarray:
    return np.array(Image.open(path).convert("L")) > 127


def write_manifest(records: list[dict], path) -> None:
    """One JSON object per line, each listing the files of one sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: bad manifest line: {e}") from None
            rec["_base"] = base
            records.append(rec)
    return records
