"""Score-field smoothing, dynamic thresholding and mask set algebra.

Fields and masks are plain float64 arrays shaped like the latent
(C, H, W). Smoothing runs on the raw importance scores, masks are cut
afterwards, so masks are binary by construction: blur -> dilate ->
threshold. The threshold is the q-quantile of the field (linear
interpolation over all entries), with >= as the tie rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_SIGMA = 1.0
DEFAULT_BLUR_RADIUS = 2
DEFAULT_QUANTILE = 0.70


@dataclass(frozen=True)
class StructuringElement:
    """Neighborhood offsets and additive heights for grayscale dilation."""

    offsets: tuple
    heights: tuple = ()

    def __post_init__(self):
        if (0, 0) not in self.offsets:
            raise ValueError("structuring element must contain (0, 0)")
        if any(max(abs(dx), abs(dy)) > 3 for dx, dy in self.offsets):
            raise ValueError("structuring element radius is capped at 3")
        if self.heights and len(self.heights) != len(self.offsets):
            raise ValueError("heights must match offsets")
        if not self.heights:
            object.__setattr__(self, "heights", (0.0,) * len(self.offsets))


def flat_square_se(radius: int = 1) -> StructuringElement:
    """Flat (zero-height) square structuring element of the given radius."""
    offs = tuple((dx, dy) for dx in range(-radius, radius + 1)
                 for dy in range(-radius, radius + 1))
    return StructuringElement(offsets=offs)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Sampled 2-D Gaussian on integer offsets, normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with edge-replication padding."""
    field = np.asarray(field, dtype=np.float64)
    kh, kw = kernel.shape
    if abs(kernel.sum() - 1.0) > 1e-9:
        raise ValueError("blur kernel must be normalized to sum 1")
    r = kh // 2
    pad = np.pad(field, ((0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(pad, (kh, kw), axis=(1, 2))
    # symmetric kernel, so correlation == convolution
    return np.einsum("cxyij,ij->cxy", win, kernel)


def dilate(field: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Grayscale dilation: out(x,y) = max over (s,t) of field(x-s, y-t) + K(s,t).

    Out-of-bounds neighbors are ignored; (0,0) membership keeps the max
    nonempty everywhere.
    """
    field = np.asarray(field, dtype=np.float64)
    c, h, w = field.shape
    out = np.full_like(field, -np.inf)
    for (dx, dy), k in zip(se.offsets, se.heights):
        xs_lo, xs_hi = max(0, dx), min(h, h + dx)
        ys_lo, ys_hi = max(0, dy), min(w, w + dy)
        if xs_lo >= xs_hi or ys_lo >= ys_hi:
            continue
        shifted = field[:, xs_lo - dx : xs_hi - dx, ys_lo - dy : ys_hi - dy] + k
        np.maximum(out[:, xs_lo:xs_hi, ys_lo:ys_hi], shifted,
                   out=out[:, xs_lo:xs_hi, ys_lo:ys_hi])
    return out


def threshold_dynamic(field: np.ndarray, q: float) -> np.ndarray:
    """Binary mask: 1 where the field is >= its q-quantile."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"quantile must be in [0, 1), got {q}")
    field = np.asarray(field, dtype=np.float64)
    theta = np.quantile(field, q)
    return (field >= theta).astype(np.float64)


def require_binary(mask: np.ndarray, what: str = "mask") -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError(f"{what} is not binary")
    return mask


def mask_union(masks) -> np.ndarray:
    """Elementwise max over a nonempty sequence of binary masks."""
    masks = [require_binary(m) for m in masks]
    if not masks:
        raise ValueError("mask_union: empty sequence")
    out = masks[0]
    for m in masks[1:]:
        if m.shape != out.shape:
            raise ValueError(f"mask_union: shape mismatch {m.shape} vs {out.shape}")
        out = np.maximum(out, m)
    return out


def mask_intersect(masks) -> np.ndarray:
    """Elementwise min over a nonempty sequence of binary masks."""
    masks = [require_binary(m) for m in masks]
    if not masks:
        raise ValueError("mask_intersect: empty sequence")
    out = masks[0]
    for m in masks[1:]:
        if m.shape != out.shape:
            raise ValueError(f"mask_intersect: shape mismatch {m.shape} vs {out.shape}")
        out = np.minimum(out, m)
    return out


def resample_nearest(arr: np.ndarray, target_hw) -> np.ndarray:
    """Nearest-neighbor resampling between integer-related grids.

    Upsampling repeats blocks; downsampling keeps the top-left sample of
    each block. Binary inputs stay binary either way.
    """
    arr = np.asarray(arr, dtype=np.float64)
    c, h, w = arr.shape
    th, tw = target_hw
    if th >= h:
        if th % h or tw % w:
            raise ValueError(f"resample_nearest: non-integer ratio {h}x{w} -> {th}x{tw}")
        return arr.repeat(th // h, axis=1).repeat(tw // w, axis=2)
    if h % th or w % tw:
        raise ValueError(f"resample_nearest: non-integer ratio {h}x{w} -> {th}x{tw}")
    return arr[:, :: h // th, :: w // tw].copy()
