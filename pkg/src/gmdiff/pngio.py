"""8-bit RGB PNG reading and writing.

Pixels travel as float64 arrays shaped (3, H, W) with values in [0, 1].
Quantization is round(v * 255) on write and byte / 255 on read, so
writing then reading an already-quantized image is the identity. Only
8-bit truecolor (color type 2) files are accepted; the IHDR header is
checked directly so 16-bit or grayscale files fail with a named error
instead of being silently converted.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _check_header(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ValueError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8:
        raise ValueError(f"{path}: unsupported bit depth {bit_depth} (need 8)")
    if color_type != 2:
        raise ValueError(f"{path}: unsupported color type {color_type} (need truecolor RGB)")


def png_read(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a (3, H, W) float64 array in [0, 1]."""
    path = Path(path)
    _check_header(path)
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img, dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"{path}: malformed PNG ({exc})") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{path}: unsupported color type")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def png_write(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float array with values in [0, 1] as 8-bit RGB PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"png_write: need (3, H, W), got {image.shape}")
    if image.min() < -1e-9 or image.max() > 1 + 1e-9:
        raise ValueError(f"png_write: values outside [0, 1] (min {image.min():.4g}, max {image.max():.4g})")
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid: round(v*255)/255."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def png_write_gray(path, field: np.ndarray) -> None:
    """Write a 2-D array as 8-bit grayscale PNG, min-max normalized."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"png_write_gray: need 2-d field, got {field.shape}")
    lo, hi = field.min(), field.max()
    scaled = np.zeros_like(field) if hi == lo else (field - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def png_write_binary(path, mask: np.ndarray) -> None:
    """Write a 2-D 0/1 mask as 8-bit grayscale PNG with values 0/255."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"png_write_binary: need 2-d mask, got {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("png_write_binary: mask is not binary")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")
