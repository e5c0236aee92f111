"""Synthetic source pairs so the full pipeline runs without external data.

All generators return a pair of ``(H, W, 1)`` arrays in [0, 1] and are
deterministic given their arguments.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ParamError

__all__ = ["complementary_pair", "blur_pair", "exposure_pair", "make_pair", "PAIR_KINDS"]


def _texture(size, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = 0.5 + 0.25 * np.sin(2 * np.pi * 3 * xx) * np.cos(2 * np.pi * 2 * yy)
    base += 0.1 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
    return np.clip(base, 0.0, 1.0)


def complementary_pair(size: int = 64, low: float = 0.2, high: float = 0.8):
    """``i`` bright on the left half, ``v`` bright on the right half."""
    if size < 2 or size % 2:
        raise ParamError("size must be an even integer >= 2")
    i = np.full((size, size, 1), low)
    i[:, : size // 2] = high
    v = np.full((size, size, 1), low)
    v[:, size // 2 :] = high
    return i, v


def blur_pair(size: int = 64, sigma: float = 2.0, seed: int = 0):
    """Multi-focus style pair: each source is sharp on one half, blurred on the other."""
    sharp = _texture(size, seed)
    blurred = ndimage.gaussian_filter(sharp, sigma, mode="nearest")
    a, b = sharp.copy(), sharp.copy()
    a[:, size // 2 :] = blurred[:, size // 2 :]
    b[:, : size // 2] = blurred[:, : size // 2]
    return a[:, :, None], b[:, :, None]


def exposure_pair(size: int = 64, gamma: float = 2.5, seed: int = 0):
    """Multi-exposure style pair: under- and over-exposed renderings of one scene."""
    scene = _texture(size, seed)
    under = scene**gamma
    over = 1.0 - (1.0 - scene) ** gamma
    return under[:, :, None], over[:, :, None]


PAIR_KINDS = {"complementary": complementary_pair, "blur": blur_pair, "exposure": exposure_pair}


def make_pair(kind: str, size: int = 64, **kw):
    try:
        fn = PAIR_KINDS[kind]
    except KeyError:
        raise ParamError(f"unknown pair kind {kind!r}; choose from {sorted(PAIR_KINDS)}") from None
    return fn(size, **kw)
