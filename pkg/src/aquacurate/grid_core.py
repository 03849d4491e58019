"""Raster primitives shared by the scoring, evaluation and loss modules.

Grids are plain numpy arrays: ``(H, W)`` for single-channel data and
``(H, W, C)`` for multi-channel data, channels last.  Storage at the file
boundary is float32; every computation here runs in float64.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError, ParameterError

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
NORMAL_EPS = 1e-7


def as_single_channel(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 3 and g.shape[2] == 1:
        g = g[:, :, 0]
    if g.ndim != 2:
        raise DimensionError(f"expected a single-channel grid, got shape {g.shape}")
    return g


def luminance(rgb) -> np.ndarray:
    """Rec.601 luma of an ``(H, W, 3)`` grid."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) grid, got shape {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[:, :, 0] + g * rgb[:, :, 1] + b * rgb[:, :, 2]


def _correlate3x3(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = g.shape
    p = np.pad(g, 1, mode="edge")
    out = np.zeros_like(g)
    # row-major tap order keeps results reproducible against naive loops
    for ky in range(3):
        for kx in range(3):
            out = out + kernel[ky, kx] * p[ky:ky + h, kx:kx + w]
    return out


def sobel_gradients(g):
    """Sobel derivatives scaled by 1/8, with replicate padding.

    A ramp rising by one unit per pixel along x gives ``gx == 1`` in the
    interior.

    Returns:
        ``(gx, gy, magnitude)`` as float64 grids of the input shape.
    """
    g = as_single_channel(g)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise DimensionError(f"sobel_gradients needs at least 3x3, got {g.shape}")
    gx = _correlate3x3(g, SOBEL_X)
    gy = _correlate3x3(g, SOBEL_Y)
    return gx, gy, np.sqrt(gx * gx + gy * gy)


def minmax_normalize(d) -> np.ndarray:
    """Affinely map ``d`` onto [0, 1]; a constant grid maps to all zeros."""
    d = np.asarray(d, dtype=np.float64)
    lo = d.min()
    hi = d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def _block_starts(n: int, factor: int) -> np.ndarray:
    return np.arange(0, n, factor)


def pool_counts(shape, factor: int) -> np.ndarray:
    """Number of source pixels behind each cell of ``avg_pool`` output."""
    h, w = shape[:2]
    rows = np.minimum(factor, h - _block_starts(h, factor))
    cols = np.minimum(factor, w - _block_starts(w, factor))
    return np.outer(rows, cols).astype(np.float64)


def avg_pool(g, factor: int) -> np.ndarray:
    """Block mean over ``factor x factor`` tiles.

    Trailing partial tiles average only the pixels they cover, so the
    output shape is the ceiling of the input shape over ``factor``.
    """
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"pooling factor must be an integer >= 1, got {factor}")
    g = np.asarray(g)
    if factor == 1:
        return g.copy()
    g = g.astype(np.result_type(g.dtype, np.float64))
    sums = np.add.reduceat(g, _block_starts(g.shape[0], factor), axis=0)
    sums = np.add.reduceat(sums, _block_starts(g.shape[1], factor), axis=1)
    counts = pool_counts(g.shape, factor)
    if g.ndim == 3:
        counts = counts[:, :, None]
    return sums / counts


def box_local_variance(d, window: int = 11) -> np.ndarray:
    """Per-pixel variance over a centred ``window x window`` neighbourhood.

    Uses box-filtered ``E[x^2] - E[x]^2`` with replicate padding, clamped
    at zero to absorb cancellation.
    """
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ParameterError(f"window must be an odd integer >= 3, got {window}")
    d = as_single_channel(d)
    mean = ndimage.uniform_filter(d, size=window, mode="nearest")
    mean_sq = ndimage.uniform_filter(d * d, size=window, mode="nearest")
    return np.maximum(mean_sq - mean * mean, 0.0)


def percentile_threshold(values, percentile: float) -> float:
    """Nearest-rank percentile: the smallest value with at least
    ``percentile`` percent of the samples at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = int(np.ceil(percentile / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def edge_mask(magnitude, percentile: float = 90.0) -> np.ndarray:
    """Binary edge map: pixels at or above the percentile threshold.

    Zero-magnitude pixels are never edges, so a flat map has no edges.
    """
    if not 0.0 < percentile < 100.0:
        raise ParameterError(f"percentile must lie in (0, 100), got {percentile}")
    mag = np.asarray(magnitude, dtype=np.float64)
    if np.any(mag < 0):
        raise ParameterError("edge_mask expects a nonnegative magnitude grid")
    if not np.any(mag > 0):
        return np.zeros(mag.shape, dtype=bool)
    thr = percentile_threshold(mag, percentile)
    return (mag >= thr) & (mag > 0)


def normalize_vectors(n, eps: float = NORMAL_EPS) -> np.ndarray:
    """Rescale each pixel vector to unit length.

    Vectors shorter than ``eps`` become ``(0, 0, 1)``.
    """
    n = np.asarray(n, dtype=np.float64)
    norm = np.sqrt(np.sum(n * n, axis=-1, keepdims=True))
    out = n / np.maximum(norm, eps)
    degenerate = norm[..., 0] < eps
    if np.any(degenerate):
        out[degenerate] = (0.0, 0.0, 1.0)
    return out


def decode_normals(png_rgb) -> np.ndarray:
    """Decode an 8-bit RGB normal image (``v / 255 * 2 - 1``) to unit vectors."""
    a = np.asarray(png_rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"normal image must have 3 channels, got shape {a.shape}")
    if a.dtype != np.uint8:
        raise FormatError(f"normal image must be 8-bit, got {a.dtype}")
    raw = a.astype(np.float64) / 255.0 * 2.0 - 1.0
    return normalize_vectors(raw)


def encode_normals(n) -> np.ndarray:
    """Inverse of ``decode_normals`` up to 8-bit quantisation."""
    n = np.clip(np.asarray(n, dtype=np.float64), -1.0, 1.0)
    return np.rint((n + 1.0) / 2.0 * 255.0).astype(np.uint8)


def check_finite(g, what: str = "grid") -> None:
    if not np.all(np.isfinite(g)):
        raise FormatError(f"{what} contains NaN or Inf")
