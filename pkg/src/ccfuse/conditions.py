"""Condition bank: differentiable fusion constraints.

Every condition maps an estimated clean image ``x0`` and the source
images to a scalar loss and the exact gradient of that loss with respect
to ``x0``. Images are ``(H, W, C)`` float arrays in [0, 1]; residual-type
losses are means over all elements, so a residual ``r = A x0 - b`` has
gradient ``2 A^T r / N``.

Conditions are grouped as *basic* (always applied, weighted by eta),
*enhanced* (gated per step by the selection mechanism) and
*task_specific* (always applied, user supplied).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ParamError, ShapeMismatch, UnknownCondition
from .metrics import ssim_and_grad
from .signal_ops import (
    WaveletPyramid,
    downsample2,
    downsample2_adjoint,
    grad_magnitude,
    haar_dwt,
    haar_idwt,
    sobel_adjoint,
    sobel_grad,
    upsample2,
    upsample2_adjoint,
)

__all__ = [
    "BASIC",
    "ENHANCED",
    "TASK_SPECIFIC",
    "ConditionSpec",
    "ConditionSet",
    "FeatureOperator",
    "IdentityOperator",
    "eval_condition",
    "combined_loss",
    "cond_mse",
    "cond_mse_pyramid",
    "cond_edge",
    "cond_highfreq",
    "cond_lowfreq",
    "cond_stat_hinge",
    "cond_ssim",
    "cond_feature",
    "default_condition_set",
    "ENHANCED_DEFAULT",
    "known_conditions",
]

BASIC = "basic"
ENHANCED = "enhanced"
TASK_SPECIFIC = "task_specific"
CATEGORIES = (BASIC, ENHANCED, TASK_SPECIFIC)

# Default hyperparameters per condition id. Names starting with "lam_" are
# mixing weights and must lie in [0, 1].
DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    "mse": {},
    "mse_pyramid": {"lam_mse": 0.5, "verbatim_sign": 0.0},
    "edge": {"lam_e": 0.5, "eps": 1e-6},
    "hf": {"lam_h": 0.5, "levels": 1.0, "band_only": 0.0},
    "lf": {"lam_l": 0.5, "levels": 1.0, "band_only": 0.0},
    "sd": {},
    "sf": {},
    "ei": {"eps": 1e-6},
    "ssim": {"aggregate_mean": 0.0},
    "feature": {"seed": 0.0, "channels": 8.0, "stride": 2.0},
}

ENHANCED_DEFAULT = ("ssim", "mse", "edge", "lf", "hf", "sf", "ei", "sd")


@dataclass(frozen=True)
class ConditionSpec:
    id: str
    category: str = ENHANCED
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in DEFAULT_PARAMS:
            raise UnknownCondition(f"unknown condition id {self.id!r}; known: {sorted(DEFAULT_PARAMS)}")
        if self.category not in CATEGORIES:
            raise ParamError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        extra = set(self.params) - set(DEFAULT_PARAMS[self.id])
        if extra:
            raise ParamError(f"condition {self.id!r} has no parameter(s) {sorted(extra)}")
        for name, value in self.params.items():
            if name.startswith("lam_") and not 0.0 <= float(value) <= 1.0:
                raise ParamError(f"{self.id}.{name} must lie in [0, 1], got {value}")
        object.__setattr__(self, "params", dict(self.params))

    def param(self, name: str) -> float:
        return float(self.params.get(name, DEFAULT_PARAMS[self.id][name]))

    def resolved_params(self) -> Dict[str, float]:
        out = dict(DEFAULT_PARAMS[self.id])
        out.update({k: float(v) for k, v in self.params.items()})
        return out


@dataclass(frozen=True)
class ConditionSet:
    """Basic (weighted), enhanced and task-specific conditions plus the guidance scale."""

    basic: Tuple[Tuple[ConditionSpec, float], ...]
    enhanced: Tuple[ConditionSpec, ...] = ()
    task_specific: Tuple[ConditionSpec, ...] = ()
    guidance_scale: float = 1.0

    def __post_init__(self):
        basic = tuple((spec, float(eta)) for spec, eta in self.basic)
        object.__setattr__(self, "basic", basic)
        object.__setattr__(self, "enhanced", tuple(self.enhanced))
        object.__setattr__(self, "task_specific", tuple(self.task_specific))
        if not basic:
            raise ParamError("a condition set needs at least one basic condition")
        if any(eta < 0 for _, eta in basic):
            raise ParamError("basic weights eta must be non-negative")
        if not self.guidance_scale >= 0:
            raise ParamError(f"guidance scale must be non-negative, got {self.guidance_scale}")
        for group in ([s for s, _ in basic], self.enhanced, self.task_specific):
            ids = [s.id for s in group]
            if len(ids) != len(set(ids)):
                raise ParamError(f"duplicate condition ids within a group: {ids}")

    @property
    def enhanced_ids(self) -> List[str]:
        return [s.id for s in self.enhanced]

    def active(self, selected: Sequence[int]) -> List[Tuple[ConditionSpec, float]]:
        """Basic, then selected enhanced, then task-specific, with weights."""
        n = len(self.enhanced)
        for j in selected:
            if not 0 <= j < n:
                raise IndexError(f"enhanced index {j} out of range for {n} conditions")
        out = list(self.basic)
        out.extend((self.enhanced[j], 1.0) for j in selected)
        out.extend((spec, 1.0) for spec in self.task_specific)
        return out


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _as3d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None] if x.ndim == 2 else x


def _pair(sources, cid):
    if len(sources) != 2:
        raise ParamError(f"condition {cid!r} needs exactly two sources, got {len(sources)}")
    return sources[0], sources[1]


def _select_max_magnitude(a, b):
    """Per coefficient, keep whichever of ``a``, ``b`` has the larger magnitude (ties -> a)."""
    return np.where(np.abs(a) >= np.abs(b), a, b)


# --------------------------------------------------------------------------
# individual conditions
# --------------------------------------------------------------------------


def cond_mse(x0, sources):
    """Sum over sources of ``mean((x0 - m)^2)``."""
    x0 = _as3d(x0)
    srcs = [_as3d(m) for m in sources]
    loss = sum(float(np.mean((x0 - m) ** 2)) for m in srcs)
    # 2 * (k x0 - sum m) / N: vanishes exactly at the floating-point midpoint
    grad = 2.0 * (len(srcs) * x0 - sum(srcs)) / x0.size
    return loss, grad


def cond_mse_pyramid(x0, y, lam_mse: float = 0.5, verbatim_sign: bool = False):
    """Content condition through a pool/upsample pyramid.

    ``r = x0 - up(lam * down(x0) + (1 - lam) * down(y))``; with
    ``verbatim_sign`` the source term is subtracted instead.
    """
    x0, y = _as3d(x0), _as3d(y)
    sign = -1.0 if verbatim_sign else 1.0
    r = x0 - upsample2(lam_mse * downsample2(x0) + sign * (1.0 - lam_mse) * downsample2(y))
    n = x0.size
    grad = 2.0 / n * (r - lam_mse * downsample2_adjoint(upsample2_adjoint(r)))
    return float(np.mean(r * r)), grad


def cond_edge(x0, i, v, lam_e: float = 0.5, eps: float = 1e-6):
    """Match ``|grad x0|`` to the per-pixel max of the weighted source edge maps."""
    x0, i, v = _as3d(x0), _as3d(i), _as3d(v)
    gx, gy = sobel_grad(x0)
    mag = grad_magnitude(gx, gy, eps)
    target = np.maximum(lam_e * grad_magnitude(*sobel_grad(i), eps), (1.0 - lam_e) * grad_magnitude(*sobel_grad(v), eps))
    r = mag - target
    n = x0.size
    grad = 2.0 / n * sobel_adjoint(r * gx / mag, r * gy / mag)
    return float(np.mean(r * r)), grad


def cond_highfreq(x0, i, v, lam_h: float = 0.5, levels: int = 1, band_only: bool = False):
    """High-frequency condition on the Haar detail bands.

    Detail coefficients of ``x0`` are compared with a sign-preserving
    max-magnitude pick between ``lam_h * HF(i)`` and ``(1 - lam_h) * HF(v)``;
    the residual image is reconstructed together with ``x0``'s own LL band,
    which therefore also gets pulled to zero. ``band_only`` drops the LL
    band from the residual.
    """
    x0, i, v = _as3d(x0), _as3d(i), _as3d(v)
    px, pi, pv = haar_dwt(x0, levels), haar_dwt(i, levels), haar_dwt(v, levels)
    details = []
    for dx, di, dv in zip(px.details, pi.details, pv.details):
        details.append(tuple(bx - _select_max_magnitude(lam_h * bi, (1.0 - lam_h) * bv) for bx, bi, bv in zip(dx, di, dv)))
    ll = np.zeros_like(px.ll) if band_only else px.ll
    delta = haar_idwt(WaveletPyramid(ll, details))
    # The wavelet is orthonormal and the target does not depend on x0, so
    # d(delta)/d(x0) is the identity.
    return float(np.mean(delta * delta)), 2.0 * delta / x0.size


def cond_lowfreq(x0, i, v, lam_l: float = 0.5, levels: int = 1, band_only: bool = False):
    """Low-frequency condition: pull LL of ``x0`` to a convex mix of the sources' LL.

    The residual keeps ``x0``'s detail bands (so detail is penalised too)
    unless ``band_only`` is set.
    """
    x0, i, v = _as3d(x0), _as3d(i), _as3d(v)
    px = haar_dwt(x0, levels)
    target = lam_l * haar_dwt(i, levels).ll + (1.0 - lam_l) * haar_dwt(v, levels).ll
    details = px.zeros_like().details if band_only else px.details
    delta = haar_idwt(WaveletPyramid(px.ll - target, details))
    return float(np.mean(delta * delta)), 2.0 * delta / x0.size


# statistics on the unit intensity scale, each with its gradient


def _sd_and_grad(x):
    d = x - x.mean()
    sd = float(np.sqrt(np.mean(d * d)))
    if sd == 0.0:
        return 0.0, np.zeros_like(x)
    return sd, d / (x.size * sd)


def _sf_and_grad(x):
    dh = x[:, 1:] - x[:, :-1]
    dv = x[1:, :] - x[:-1, :]
    rf2 = float(np.mean(dh * dh))
    cf2 = float(np.mean(dv * dv))
    sf = np.sqrt(rf2 + cf2)
    if sf == 0.0:
        return 0.0, np.zeros_like(x)
    g = np.zeros_like(x)
    ch = 2.0 / dh.size * dh
    cv = 2.0 / dv.size * dv
    g[:, 1:] += ch
    g[:, :-1] -= ch
    g[1:, :] += cv
    g[:-1, :] -= cv
    return float(sf), g / (2.0 * sf)


def _ei_and_grad(x, eps):
    gx, gy = sobel_grad(x)
    mag = grad_magnitude(gx, gy, eps)
    return float(mag.mean()), sobel_adjoint(gx / mag, gy / mag) / x.size


def _stat_fn(stat, eps):
    if stat == "sd":
        return _sd_and_grad
    if stat == "sf":
        return _sf_and_grad
    if stat == "ei":
        return lambda x: _ei_and_grad(x, eps)
    raise UnknownCondition(f"unknown statistic {stat!r}")


def cond_stat_hinge(x0, sources, stat: str, eps: float = 1e-6):
    """Squared hinge ``max(0, target - stat(x0))^2`` with target the best source statistic."""
    fn = _stat_fn(stat, eps)
    x0 = _as3d(x0)
    target = max(fn(_as3d(m))[0] for m in sources)
    value, g = fn(x0)
    gap = target - value
    if gap <= 0.0:
        return 0.0, np.zeros_like(x0)
    return gap * gap, -2.0 * gap * g


def cond_ssim(x0, sources, aggregate_mean: bool = False):
    """``sum_m (1 - SSIM(x0, m))`` (or the mean over sources)."""
    x0 = _as3d(x0)
    loss = 0.0
    grad = np.zeros_like(x0)
    for m in sources:
        s, g = ssim_and_grad(x0, m)
        loss += 1.0 - s
        grad -= g
    if aggregate_mean:
        loss /= len(sources)
        grad /= len(sources)
    return loss, grad


class IdentityOperator:
    """Feature operator that returns its input; handy for tests."""

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)

    def adjoint(self, y, shape=None):
        return np.asarray(y, dtype=np.float64)


class FeatureOperator:
    """Fixed random bank of 3x3 convolutions with zero padding and a stride.

    Stands in for a detection backbone's feature extractor: linear, seeded
    and cheap, so the feature condition stays exactly differentiable.
    Output shape is ``(ceil(H/stride), ceil(W/stride), out_channels)``.
    """

    def __init__(self, in_channels: int, out_channels: int = 8, stride: int = 2, seed: int = 0):
        if stride < 1 or out_channels < 1:
            raise ParamError("stride and out_channels must be positive")
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((3, 3, in_channels, out_channels)) / np.sqrt(9.0 * in_channels)
        self.stride = stride

    def forward(self, x):
        x = _as3d(x)
        h, w = x.shape[:2]
        p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        out = np.zeros((h, w, self.weights.shape[3]))
        for a in range(3):
            for b in range(3):
                out += p[a : a + h, b : b + w] @ self.weights[a, b]
        return out[:: self.stride, :: self.stride]

    def adjoint(self, y, shape):
        h, w = shape[:2]
        full = np.zeros((h, w, self.weights.shape[3]))
        full[:: self.stride, :: self.stride] = y
        p = np.zeros((h + 2, w + 2, self.weights.shape[2]))
        for a in range(3):
            for b in range(3):
                p[a : a + h, b : b + w] += full @ self.weights[a, b].T
        return p[1:-1, 1:-1]


@lru_cache(maxsize=16)
def _feature_operator(in_channels, out_channels, stride, seed):
    return FeatureOperator(in_channels, out_channels, stride, seed)


def cond_feature(x0, sources, operator=None):
    """``sum_m ||Phi(x0) - Phi(m)||^2 / |m|`` for a linear feature map Phi."""
    x0 = _as3d(x0)
    op = operator if operator is not None else _feature_operator(x0.shape[2], 8, 2, 0)
    fx = op.forward(x0)
    loss = 0.0
    back = np.zeros_like(fx)
    for m in sources:
        m = _as3d(m)
        r = fx - op.forward(m)
        loss += float(np.sum(r * r)) / m.size
        back += 2.0 * r / m.size
    grad = op.adjoint(back, x0.shape)
    return loss, grad


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _dispatch_mse_pyramid(x0, sources, p):
    # averaged over sources
    loss, grad = 0.0, np.zeros_like(x0)
    for y in sources:
        l, g = cond_mse_pyramid(x0, y, p["lam_mse"], bool(p["verbatim_sign"]))
        loss += l
        grad += g
    return loss / len(sources), grad / len(sources)


_REGISTRY: Dict[str, Callable] = {
    "mse": lambda x0, s, p: cond_mse(x0, s),
    "mse_pyramid": _dispatch_mse_pyramid,
    "edge": lambda x0, s, p: cond_edge(x0, *_pair(s, "edge"), p["lam_e"], p["eps"]),
    "hf": lambda x0, s, p: cond_highfreq(x0, *_pair(s, "hf"), p["lam_h"], int(p["levels"]), bool(p["band_only"])),
    "lf": lambda x0, s, p: cond_lowfreq(x0, *_pair(s, "lf"), p["lam_l"], int(p["levels"]), bool(p["band_only"])),
    "sd": lambda x0, s, p: cond_stat_hinge(x0, s, "sd"),
    "sf": lambda x0, s, p: cond_stat_hinge(x0, s, "sf"),
    "ei": lambda x0, s, p: cond_stat_hinge(x0, s, "ei", p["eps"]),
    "ssim": lambda x0, s, p: cond_ssim(x0, s, bool(p["aggregate_mean"])),
    "feature": lambda x0, s, p: cond_feature(
        x0, s, _feature_operator(x0.shape[2], int(p["channels"]), int(p["stride"]), int(p["seed"]))
    ),
}


def known_conditions() -> List[str]:
    return sorted(_REGISTRY)


def eval_condition(spec: ConditionSpec, x0, sources):
    """Loss and gradient image of one condition at ``x0``."""
    fn = _REGISTRY.get(spec.id)
    if fn is None:
        raise UnknownCondition(f"unknown condition id {spec.id!r}")
    x0 = _as3d(x0)
    srcs = [_as3d(s) for s in sources]
    if not srcs:
        raise ParamError("at least one source image is required")
    for s in srcs:
        if s.shape != x0.shape:
            raise ShapeMismatch(f"source shape {s.shape} does not match x0 shape {x0.shape}")
    loss, grad = fn(x0, srcs, spec.resolved_params())
    return float(loss), grad


def combined_loss(cset: ConditionSet, selected: Sequence[int], x0, sources):
    """Weighted basic losses plus the selected enhanced and all task-specific ones."""
    x0 = _as3d(x0)
    total = 0.0
    grad = np.zeros_like(x0)
    for spec, weight in cset.active(selected):
        if weight == 0.0:
            continue
        l, g = eval_condition(spec, x0, sources)
        total += weight * l
        grad += weight * g
    return total, grad


def default_condition_set(task: str = "vif", guidance_scale: float = 1.0, enhanced=ENHANCED_DEFAULT, params=None):
    """Task defaults: VIF uses plain two-source MSE as the basic condition.

    MEF/MFF use the pyramid-MSE, high/low-frequency and edge conditions
    with unit weights. ``params`` maps condition id to parameter overrides.
    """
    params = params or {}

    def spec(cid, category):
        return ConditionSpec(cid, category, params.get(cid, {}))

    if task == "vif" or task == "custom":
        basic = [(spec("mse", BASIC), 1.0)]
    elif task in ("mef", "mff"):
        basic = [(spec(c, BASIC), 1.0) for c in ("mse_pyramid", "hf", "lf", "edge")]
    else:
        raise ParamError(f"unknown task {task!r}")
    return ConditionSet(
        basic=tuple(basic),
        enhanced=tuple(spec(c, ENHANCED) for c in enhanced),
        guidance_scale=guidance_scale,
    )
