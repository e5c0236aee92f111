"""Linear signal primitives and their adjoints.

All functions act on the two leading (spatial) axes of an array shaped
``(H, W)`` or ``(H, W, C)``; trailing channel axes are carried along.
Every linear operator ``A`` here ships with ``A_adjoint`` so condition
gradients can be formed as ``A^T r`` without autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import DimensionError, ParamError, ShapeMismatch

__all__ = [
    "WaveletPyramid",
    "haar_dwt",
    "haar_idwt",
    "sobel_grad",
    "sobel_adjoint",
    "grad_magnitude",
    "downsample2",
    "downsample2_adjoint",
    "upsample2",
    "upsample2_adjoint",
    "gaussian_window",
    "SOBEL_X",
    "SOBEL_Y",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


# --------------------------------------------------------------------------
# Haar wavelet
# --------------------------------------------------------------------------


@dataclass
class WaveletPyramid:
    """Multi-level orthonormal Haar decomposition.

    ``details[k-1]`` holds ``(HL_k, LH_k, HH_k)`` for level ``k``; level 1
    is the finest. ``ll`` is the level-``K`` approximation.
    """

    ll: np.ndarray
    details: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def levels(self) -> int:
        return len(self.details)

    def bands(self):
        """All coefficient arrays, coarse approximation first."""
        out = [self.ll]
        for trio in self.details:
            out.extend(trio)
        return out

    def map(self, fn) -> "WaveletPyramid":
        return WaveletPyramid(fn(self.ll), [tuple(fn(b) for b in trio) for trio in self.details])

    def zeros_like(self) -> "WaveletPyramid":
        return self.map(np.zeros_like)


def _haar_level(x):
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    hl = (a - b + c - d) / 2.0
    lh = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, hl, lh, hh


def _haar_level_inv(ll, hl, lh, hh):
    shape = (2 * ll.shape[0], 2 * ll.shape[1]) + ll.shape[2:]
    x = np.empty(shape, dtype=np.result_type(ll, hl, lh, hh, np.float64))
    x[0::2, 0::2] = (ll + hl + lh + hh) / 2.0
    x[0::2, 1::2] = (ll - hl + lh - hh) / 2.0
    x[1::2, 0::2] = (ll + hl - lh - hh) / 2.0
    x[1::2, 1::2] = (ll - hl - lh + hh) / 2.0
    return x


def haar_dwt(img, levels: int = 1) -> WaveletPyramid:
    """Orthonormal 2-D Haar analysis, applied recursively to LL.

    Raises
    ------
    DimensionError
        If height or width is not divisible by ``2**levels``.
    """
    x = np.asarray(img, dtype=np.float64)
    if levels < 1:
        raise ParamError(f"levels must be >= 1, got {levels}")
    m = 2**levels
    if x.shape[0] % m or x.shape[1] % m:
        raise DimensionError(f"{x.shape[0]}x{x.shape[1]} image is not divisible by 2^{levels}")
    details = []
    ll = x
    for _ in range(levels):
        ll, hl, lh, hh = _haar_level(ll)
        details.append((hl, lh, hh))
    return WaveletPyramid(ll, details)


def haar_idwt(pyr: WaveletPyramid) -> np.ndarray:
    """Exact inverse (and adjoint) of :func:`haar_dwt`."""
    ll = np.asarray(pyr.ll, dtype=np.float64)
    for hl, lh, hh in reversed(pyr.details):
        if not (ll.shape == np.shape(hl) == np.shape(lh) == np.shape(hh)):
            raise DimensionError(
                f"inconsistent band shapes {ll.shape}, {np.shape(hl)}, {np.shape(lh)}, {np.shape(hh)}"
            )
        ll = _haar_level_inv(ll, hl, lh, hh)
    return ll


# --------------------------------------------------------------------------
# 3x3 correlation with replicate borders (Sobel)
# --------------------------------------------------------------------------


def _pad_edge(x):
    width = [(1, 1), (1, 1)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, width, mode="edge")


def _pad_edge_adjoint(p):
    out = p[1:-1, 1:-1].copy()
    out[0] += p[0, 1:-1]
    out[-1] += p[-1, 1:-1]
    out[:, 0] += p[1:-1, 0]
    out[:, -1] += p[1:-1, -1]
    out[0, 0] += p[0, 0]
    out[0, -1] += p[0, -1]
    out[-1, 0] += p[-1, 0]
    out[-1, -1] += p[-1, -1]
    return out


def _correlate3(x, kernel):
    h, w = x.shape[:2]
    p = _pad_edge(x)
    # Positive and negative taps are summed separately so that a constant
    # input cancels exactly for zero-sum kernels.
    pos = np.zeros_like(x, dtype=np.float64)
    neg = np.zeros_like(x, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k > 0:
                pos += k * p[i : i + h, j : j + w]
            elif k < 0:
                neg -= k * p[i : i + h, j : j + w]
    return pos - neg


def _correlate3_adjoint(y, kernel):
    h, w = y.shape[:2]
    p = np.zeros((h + 2, w + 2) + y.shape[2:])
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                p[i : i + h, j : j + w] += kernel[i, j] * y
    return _pad_edge_adjoint(p)


def sobel_grad(img):
    """Sobel derivatives ``(gx, gy)`` with replicate padding.

    ``gx`` responds to increase along columns: a ramp ``x[r, c] = s*c``
    gives ``gx = 8s`` in the interior.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise DimensionError(f"Sobel needs at least 3x3, got {x.shape[0]}x{x.shape[1]}")
    return _correlate3(x, SOBEL_X), _correlate3(x, SOBEL_Y)


def sobel_adjoint(gx, gy):
    """Adjoint of :func:`sobel_grad` viewed as one map ``x -> (gx, gy)``."""
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ShapeMismatch(f"{gx.shape} vs {gy.shape}")
    return _correlate3_adjoint(gx, SOBEL_X) + _correlate3_adjoint(gy, SOBEL_Y)


def grad_magnitude(gx, gy, eps: float = 1e-6):
    """Smooth gradient magnitude ``sqrt(gx^2 + gy^2 + eps^2)``."""
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ShapeMismatch(f"{gx.shape} vs {gy.shape}")
    return np.sqrt(gx * gx + gy * gy + eps * eps)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def _pool_matrix(n):
    m = np.zeros((n // 2, n))
    idx = np.arange(n // 2)
    m[idx, 2 * idx] = 0.5
    m[idx, 2 * idx + 1] = 0.5
    return m


def _bilinear_matrix(n):
    # Half-pixel aligned: fine sample i sits at coarse coordinate i/2 - 1/4,
    # clamped to [0, n-1] at the borders.
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        u = min(max(i / 2.0 - 0.25, 0.0), n - 1.0)
        lo = int(np.floor(u))
        hi = min(lo + 1, n - 1)
        frac = u - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _apply_separable(x, rows, cols):
    # rows @ x @ cols.T over the two leading axes
    return np.einsum("ab,bc...,dc->ad...", rows, x, cols, optimize=True)


def downsample2(img):
    """2x2 average pooling."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError(f"downsample2 needs even dimensions, got {h}x{w}")
    return (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4.0


def downsample2_adjoint(y):
    y = np.asarray(y, dtype=np.float64)
    return np.repeat(np.repeat(y, 2, axis=0), 2, axis=1) / 4.0


def upsample2(img):
    """Bilinear 2x upsampling (half-pixel centres, replicated borders)."""
    x = np.asarray(img, dtype=np.float64)
    return _apply_separable(x, _bilinear_matrix(x.shape[0]), _bilinear_matrix(x.shape[1]))


def upsample2_adjoint(y):
    y = np.asarray(y, dtype=np.float64)
    h, w = y.shape[0] // 2, y.shape[1] // 2
    return _apply_separable(y, _bilinear_matrix(h).T, _bilinear_matrix(w).T)


# --------------------------------------------------------------------------
# Gaussian window
# --------------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised isotropic Gaussian taps of shape ``(size, size)``."""
    if size < 1 or size % 2 == 0:
        raise ParamError(f"window size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ParamError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()
