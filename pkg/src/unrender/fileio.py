"""File formats: PFM float maps, 8-bit PNG images, JSON documents.

PFM follows the usual convention: 'PF' / 'Pf' magic for 3- / 1-channel
data, rows stored bottom-to-top, and the sign of the scale field encoding
endianness (negative = little-endian). All writes are atomic
(write-temp-then-rename) so concurrent readers never observe partial files.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from unrender.types import ENCODING_GAMMA, ImageRGB, Mask


def _atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array, (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if header is None:
        raise ValueError(f"{path}: not a PFM file")
    magic, width, height = header.group(1), int(header.group(2)), int(header.group(3))
    scale = float(header.group(4))
    channels = 3 if magic == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    data = np.frombuffer(raw[header.end():], dtype=dtype, count=count)
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    data = data.reshape(height, width, channels)
    data = np.flipud(data).astype(np.float32)
    return data[:, :, 0] if channels == 1 else data


def write_pfm(path, data: np.ndarray):
    """Write a float array, (H, W) or (H, W, 1|3), as little-endian PFM."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic, flat = b"Pf", np.flipud(arr)
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, flat = b"PF", np.flipud(arr)
    else:
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {arr.shape}")
    height, width = arr.shape[:2]
    header = magic + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n"
    _atomic_write_bytes(path, header + flat.astype("<f4").tobytes())


def read_png(path) -> ImageRGB:
    """Load an 8-bit PNG as a gamma-encoded image; values clamped to [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageRGB(np.clip(rgb, 0.0, 1.0), encoding=ENCODING_GAMMA)


def write_png(path, img: ImageRGB):
    """Write a gamma-encoded image as 8-bit PNG (values clamped to [0, 1])."""
    if img.encoding != ENCODING_GAMMA:
        raise ValueError("write_png expects a gamma-encoded image")
    quantized = np.clip(np.round(np.clip(img.data, 0.0, 1.0) * 255.0), 0, 255)
    pil = Image.fromarray(quantized.astype(np.uint8), mode="RGB")
    import io as _io

    buf = _io.BytesIO()
    pil.save(buf, format="PNG")
    _atomic_write_bytes(path, buf.getvalue())


def read_mask_png(path) -> Mask:
    """Load a mask PNG: any pixel with value > 127 counts as set."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return Mask(gray > 127)


def write_mask_png(path, mask: Mask):
    pil = Image.fromarray(np.where(mask.data, 255, 0).astype(np.uint8), mode="L")
    import io as _io

    buf = _io.BytesIO()
    pil.save(buf, format="PNG")
    _atomic_write_bytes(path, buf.getvalue())


def write_json(path, obj):
    """Write JSON with floats at full double precision (repr round-trip)."""
    _atomic_write_bytes(path, json.dumps(obj, indent=2).encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
