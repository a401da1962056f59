"""Lossless 8-bit grayscale PNG I/O."""

from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image

from gswxray.core import GrayImage
from gswxray.formats.errors import FormatError


def save_image(img: GrayImage, path: str | os.PathLike | None = None) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img.pixels), mode="L").save(buf, format="PNG", optimize=False)
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_image(source: bytes | str | os.PathLike) -> GrayImage:
    """Read an 8-bit grayscale raster. Color or high-bit-depth files are refused, not converted."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        with Image.open(source) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise FormatError(f"unsupported: bit depth of mode {mode!r} is not 8-bit")
            if mode != "L":
                raise FormatError(f"unsupported: not grayscale (mode {mode!r})")
            arr = np.array(im, dtype=np.uint8)
    except FormatError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"unreadable image: {exc}") from None
    return GrayImage(arr)


def save_rgb(pixels: np.ndarray, path: str | os.PathLike | None = None) -> bytes:
    """Write an ``(H, W, 3)`` uint8 array as an RGB PNG."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data
