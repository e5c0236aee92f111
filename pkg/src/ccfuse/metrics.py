"""Fusion quality metrics.

Reference metrics compare a fused image against its sources (SSIM, MSE,
CC, PSNR, SCD); no-reference statistics describe the fused image alone
(SD, AG, SF, EN, EI). Intensity-valued quantities are reported on the
8-bit scale (inputs in [0, 1] are multiplied by 255) so magnitudes line up
with published fusion benchmarks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import signal as sps

from .errors import DimensionError, ShapeMismatch
from .signal_ops import gaussian_window, sobel_grad

__all__ = [
    "METRIC_KEYS",
    "SSIM_K1",
    "SSIM_K2",
    "MetricReport",
    "metric_ssim",
    "ssim_and_grad",
    "pearson",
    "metric_pair_suite",
    "metric_stats",
    "std_dev",
    "average_gradient",
    "spatial_frequency",
    "entropy",
    "edge_intensity",
]

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

METRIC_KEYS = ("ssim", "mse", "cc", "psnr", "scd", "sd", "ag", "sf", "en", "ei")


def _as3d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None] if x.ndim == 2 else x


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def _filt(x, w):
    # valid-mode correlation per channel
    return np.stack([sps.correlate2d(x[:, :, c], w, mode="valid") for c in range(x.shape[2])], axis=2)


def _filt_adjoint(y, w):
    return np.stack([sps.convolve2d(y[:, :, c], w, mode="full") for c in range(y.shape[2])], axis=2)


def _ssim_terms(x, y, data_range):
    w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filt(x, w), _filt(y, w)
    sxx = _filt(x * x, w) - mx * mx
    syy = _filt(y * y, w) - my * my
    sxy = _filt(x * y, w) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    smap = (a1 * a2) / (b1 * b2)
    return w, smap, (mx, my, a1, a2, b1, b2)


def metric_ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Colour images average the per-channel maps.
    """
    a, b = _as3d(a), _as3d(b)
    _check_same(a, b)
    _, smap, _ = _ssim_terms(a, b, data_range)
    return float(smap.mean())


def ssim_and_grad(x, y, data_range: float = 1.0):
    """Mean SSIM(x, y) and its exact gradient with respect to ``x``."""
    x, y = _as3d(x), _as3d(y)
    _check_same(x, y)
    w, smap, (mx, my, a1, a2, b1, b2) = _ssim_terms(x, y, data_range)
    n = smap.size
    # SSIM as a function of window moments m = E[x], q = E[x^2], r = E[xy]
    d_m = smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_q = -smap / b2
    d_r = 2 * smap / a2
    grad = _filt_adjoint(d_m, w) + 2 * x * _filt_adjoint(d_q, w) + y * _filt_adjoint(d_r, w)
    return float(smap.mean()), grad / n


# --------------------------------------------------------------------------
# Reference metrics
# --------------------------------------------------------------------------


def pearson(a, b) -> float:
    """Pearson correlation; defined as 0 when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return 0.0
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if den == 0.0:
        return 0.0
    return float(np.dot(da, db) / den)


def _mse255(a, b):
    d = 255.0 * (a - b)
    return float(np.mean(d * d))


def _psnr(mse):
    return math.inf if mse == 0.0 else 10.0 * math.log10(255.0**2 / mse)


# --------------------------------------------------------------------------
# No-reference statistics (8-bit scale by default)
# --------------------------------------------------------------------------


def std_dev(img, scale: float = 255.0) -> float:
    """Population standard deviation (exactly 0 for constant images)."""
    x = scale * np.asarray(img, dtype=np.float64)
    return 0.0 if np.ptp(x) == 0.0 else float(np.std(x))


def average_gradient(img, scale: float = 255.0) -> float:
    """Mean of ``sqrt((dx^2 + dy^2) / 2)`` over forward differences.

    Both differences are taken at pixel ``(r, c)``, so only the
    ``(H-1) x (W-1)`` interior contributes.
    """
    x = scale * _as3d(img)
    dx = x[:-1, 1:] - x[:-1, :-1]
    dy = x[1:, :-1] - x[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def spatial_frequency(img, scale: float = 255.0) -> float:
    """``sqrt(RF^2 + CF^2)`` with RMS row and column forward differences."""
    x = scale * _as3d(img)
    rf2 = np.mean((x[:, 1:] - x[:, :-1]) ** 2)
    cf2 = np.mean((x[1:, :] - x[:-1, :]) ** 2)
    return float(np.sqrt(rf2 + cf2))


def entropy(img) -> float:
    """Shannon entropy in bits of the 256-bin histogram of the quantized image."""
    q = np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)
    counts = np.bincount(q.ravel(), minlength=256)
    p = counts[counts > 0] / q.size
    return float(max(0.0, -np.sum(p * np.log2(p))))


def edge_intensity(img, scale: float = 255.0) -> float:
    """Mean Sobel gradient magnitude."""
    gx, gy = sobel_grad(scale * _as3d(img))
    return float(np.mean(np.sqrt(gx * gx + gy * gy)))


def metric_stats(img) -> Dict[str, float]:
    x = _as3d(img)
    if min(x.shape[:2]) < 3:
        raise DimensionError(f"statistics need at least 3x3 images, got {x.shape[:2]}")
    return {
        "sd": std_dev(x),
        "ag": average_gradient(x),
        "sf": spatial_frequency(x),
        "en": entropy(x),
        "ei": edge_intensity(x),
    }


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Metric values keyed by id, plus per-source breakdowns.

    ``values['ssim']`` is the sum over sources and ``values['mse']`` / ``['cc']``
    the mean over sources, matching how VIF benchmark tables report them.
    """

    values: Dict[str, float]
    per_source: List[Dict[str, float]] = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self):
        out = {k: _json_float(self.values[k]) for k in METRIC_KEYS if k in self.values}
        out["per_source"] = [{k: _json_float(v) for k, v in d.items()} for d in self.per_source]
        return out

    def to_json(self, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"


def _json_float(v):
    # JSON has no infinity literal; PSNR of identical images is written as "inf".
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def metric_pair_suite(fused, a, b) -> MetricReport:
    """Full report for a fused image against two sources."""
    f, a, b = _as3d(fused), _as3d(a), _as3d(b)
    _check_same(f, a)
    _check_same(f, b)
    per = []
    for src in (a, b):
        mse = _mse255(f, src)
        per.append(
            {
                "ssim": metric_ssim(f, src),
                "mse": mse,
                "cc": pearson(f, src),
                "psnr": _psnr(mse),
            }
        )
    mse = 0.5 * (per[0]["mse"] + per[1]["mse"])
    values = {
        "ssim": per[0]["ssim"] + per[1]["ssim"],
        "mse": mse,
        "cc": 0.5 * (per[0]["cc"] + per[1]["cc"]),
        "psnr": _psnr(mse),
        "scd": pearson(f - a, b) + pearson(f - b, a),
    }
    values.update(metric_stats(f))
    return MetricReport(values, per)
