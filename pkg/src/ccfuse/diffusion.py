"""DDPM sampling with guided correction of the clean-image estimate.

The engine works in the symmetric range [-1, 1]; conditions and sources
live in [0, 1] and are mapped at the boundary (``x01 = (x + 1) / 2``).

At every reverse step ``t = T..1``:

1. predict the noise and form the one-shot clean estimate ``x0|t``;
2. score the enhanced conditions at that estimate, update the gate and
   pick the active subset;
3. walk the active conditions, taking a gradient step on the estimate
   for each one, and clamp the result to [-1, 1];
4. draw ``x_{t-1}`` from the DDPM posterior centred on the corrected
   estimate.

The guidance step uses the condition gradient multiplied by the number of
image elements. Conditions report mean losses, so this turns the step
into a per-pixel quantity and ``guidance_scale`` has the same meaning at
every image size: for the two-source MSE condition a scale of 1 moves the
estimate exactly onto the sources' midpoint. Conditions differ a lot in
curvature (Sobel- and SSIM-based ones are much stiffer than plain MSE),
so each step is halved until the condition it serves does not get worse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np

from .conditions import ConditionSet, combined_loss, eval_condition
from .errors import NonFiniteError, ParamError, ShapeMismatch
from .gate import GateState, SelectionTrace, gate_update, record_step, select_topk

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_marginal",
    "estimate_x0",
    "Denoiser",
    "OracleDenoiser",
    "GMMDenoiser",
    "predict_noise",
    "guided_correction",
    "reverse_step",
    "FusionResult",
    "sample_fusion",
    "to_engine",
    "from_engine",
]


def to_engine(x01):
    return 2.0 * np.asarray(x01, dtype=np.float64) - 1.0


def from_engine(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with derived products.

    Vectors are stored 1-indexed: entry ``0`` is the ``t = 0`` convention
    (``beta = 0``, ``alpha_bar = 1``), so ``sched.alpha_bar[t]`` reads
    naturally.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParamError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParamError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    post = np.zeros_like(beta)
    post[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    for arr in (beta, alpha, alpha_bar, post):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, post)


def _check_t(t, sched):
    if not 1 <= t <= sched.T:
        raise ParamError(f"timestep {t} outside 1..{sched.T}")


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"{x0.shape} vs {eps.shape}")
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def estimate_x0(x_t, t: int, eps_hat, sched: NoiseSchedule):
    """Invert the forward marginal given a noise prediction (no clamping)."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(ab)


class Denoiser(Protocol):
    def predict_noise(self, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray: ...


class OracleDenoiser:
    """Returns the noise that makes the clean estimate equal ``target`` exactly.

    ``target`` is given in engine range [-1, 1].
    """

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def predict_noise(self, x_t, t, sched):
        ab = sched.alpha_bar[t]
        return (np.asarray(x_t) - np.sqrt(ab) * self.target) / np.sqrt(1.0 - ab)


class GMMDenoiser:
    """Exact posterior-mean denoiser for a per-pixel Gaussian mixture prior.

    Pixel ``p`` of the clean image is drawn from
    ``sum_j w_j N(means[j][p], variance)``. Means are in engine range.
    """

    def __init__(self, means: Sequence, weights: Optional[Sequence[float]] = None, variance: float = 0.0):
        self.means = np.stack([np.asarray(m, dtype=np.float64) for m in means])
        n = len(self.means)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParamError("mixture weights must be positive and sum to 1")
        if variance < 0:
            raise ParamError("component variance must be non-negative")
        self.weights = w
        self.variance = float(variance)

    def responsibilities(self, x_t, t, sched):
        ab = sched.alpha_bar[t]
        var = 1.0 - ab + ab * self.variance
        d = np.asarray(x_t)[None] - np.sqrt(ab) * self.means
        shape = (-1,) + (1,) * (self.means.ndim - 1)
        logits = np.log(self.weights).reshape(shape) - d * d / (2.0 * var)
        logits -= logits.max(axis=0, keepdims=True)
        r = np.exp(logits)
        return r / r.sum(axis=0, keepdims=True)

    def posterior_mean(self, x_t, t, sched):
        ab = sched.alpha_bar[t]
        var = 1.0 - ab + ab * self.variance
        r = self.responsibilities(x_t, t, sched)
        # E[x0 | x_t, j] = mu_j + gain * (x_t - sqrt(ab) mu_j)
        gain = np.sqrt(ab) * self.variance / var
        comp = self.means + gain * (np.asarray(x_t)[None] - np.sqrt(ab) * self.means)
        return np.sum(r * comp, axis=0)

    def predict_noise(self, x_t, t, sched):
        ab = sched.alpha_bar[t]
        return (np.asarray(x_t) - np.sqrt(ab) * self.posterior_mean(x_t, t, sched)) / np.sqrt(1.0 - ab)


def predict_noise(denoiser: Denoiser, x_t, t: int, sched: NoiseSchedule):
    _check_t(t, sched)
    return denoiser.predict_noise(np.asarray(x_t, dtype=np.float64), t, sched)


def _descent_step(x, loss_fn, loss, grad, step, max_halvings):
    """Gradient step of size ``step`` that halves until ``loss_fn`` does not increase."""
    for _ in range(max_halvings + 1):
        cand = x - step * grad
        if loss_fn(cand) <= loss:
            return cand
        step *= 0.5
    return x


def guided_correction(
    x0,
    cset: ConditionSet,
    selected: Sequence[int],
    sources,
    lam: Optional[float] = None,
    parallel_grads: bool = False,
    max_halvings: Optional[int] = 20,
):
    """Gradient correction of a clean estimate (engine range) by the active conditions.

    Conditions are visited last-to-first (basic, selected enhanced,
    task-specific order, reversed); each step re-evaluates the gradient at
    the current estimate. With ``parallel_grads`` all gradients are taken
    at the input and applied at once. The result is clamped to [-1, 1].

    Each step is ``lam * eta * N * grad`` (N = number of elements, the
    gradient taken with respect to the engine-range estimate) and is
    halved up to ``max_halvings`` times until the condition's own loss
    does not increase; ``max_halvings=None`` takes the raw step.
    """
    lam = cset.guidance_scale if lam is None else lam
    x = np.array(x0, dtype=np.float64)
    if lam == 0.0:
        return np.clip(x, -1.0, 1.0)
    n = x.size
    if parallel_grads:
        steps = [(lambda y: combined_loss(cset, selected, from_engine(y), sources), 1.0)]
    else:
        steps = [
            ((lambda y, spec=spec: eval_condition(spec, from_engine(y), sources)), weight)
            for spec, weight in reversed(cset.active(selected))
            if weight != 0.0
        ]
    for fn, weight in steps:
        loss, g = fn(x)
        # chain rule through x01 = (x + 1) / 2
        g = 0.5 * n * g.reshape(x.shape)
        if max_halvings is None:
            x = x - lam * weight * g
        else:
            x = _descent_step(x, lambda y: fn(y)[0], loss, g, lam * weight, max_halvings)
    return np.clip(x, -1.0, 1.0)


def reverse_step(x_t, x0_hat, t: int, z, sched: NoiseSchedule):
    """Sample ``x_{t-1}`` from the DDPM posterior q(x_{t-1} | x_t, x0_hat)."""
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x_t.shape != x0_hat.shape:
        raise ShapeMismatch(f"{x_t.shape} vs {x0_hat.shape}")
    if t == 1:
        # alpha_bar_0 = 1: the posterior collapses onto the clean estimate
        return x0_hat.copy()
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    ct = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    out = c0 * x0_hat + ct * x_t
    if z is not None:
        out = out + np.sqrt(sched.posterior_var[t]) * np.asarray(z, dtype=np.float64)
    return out


@dataclass
class FusionResult:
    fused: np.ndarray  # [0, 1]
    trace: SelectionTrace
    final_losses: Dict[str, Dict[str, float]] = field(default_factory=dict)
    gate: Optional[GateState] = None

    @property
    def basic_loss(self) -> float:
        """eta-weighted basic loss at the fused image."""
        return self.final_losses["basic_combined"]["total"]


def _final_losses(cset: ConditionSet, fused01, sources):
    out: Dict[str, Dict[str, float]] = {"basic": {}, "enhanced": {}, "task_specific": {}}
    total = 0.0
    for spec, eta in cset.basic:
        loss, _ = eval_condition(spec, fused01, sources)
        out["basic"][spec.id] = loss
        total += eta * loss
    for spec in cset.enhanced:
        out["enhanced"][spec.id] = eval_condition(spec, fused01, sources)[0]
    for spec in cset.task_specific:
        out["task_specific"][spec.id] = eval_condition(spec, fused01, sources)[0]
    out["basic_combined"] = {"total": total}
    return out


def sample_fusion(
    sources,
    cset: ConditionSet,
    gate: GateState,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    seed: int,
    selection: str = "scs",
    parallel_grads: bool = False,
    max_halvings: Optional[int] = 20,
) -> FusionResult:
    """Run the full guided reverse process.

    Parameters
    ----------
    sources : sequence of arrays
        Source images in [0, 1], all the same shape.
    selection : {"scs", "all", "none"}
        ``scs`` gates the enhanced conditions; ``all`` applies every
        enhanced condition at every step; ``none`` applies none.
    max_halvings : int or None
        Backtracking budget of each guidance step (see ``guided_correction``).
    """
    srcs = [np.asarray(s, dtype=np.float64) for s in sources]
    if not srcs:
        raise ParamError("need at least one source image")
    shape = srcs[0].shape
    if any(s.shape != shape for s in srcs):
        raise ShapeMismatch(f"source shapes differ: {[s.shape for s in srcs]}")
    if selection not in ("scs", "all", "none"):
        raise ParamError(f"unknown selection mode {selection!r}")
    if gate.n != len(cset.enhanced):
        raise ParamError(f"gate tracks {gate.n} conditions but the set has {len(cset.enhanced)} enhanced")

    rng = np.random.default_rng(seed)
    trace = SelectionTrace(cset.enhanced_ids)
    x = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        s = sched.T - t
        eps = predict_noise(denoiser, x, t, sched)
        x0 = estimate_x0(x, t, eps, sched)
        x0_01 = from_engine(x0)
        losses = [eval_condition(spec, x0_01, srcs)[0] for spec in cset.enhanced]
        gate = gate_update(gate, losses)
        if selection == "scs":
            selected = select_topk(gate, step=s)
        elif selection == "all":
            selected = list(range(len(cset.enhanced)))
        else:
            selected = []
        x0_hat = guided_correction(
            x0, cset, selected, srcs, parallel_grads=parallel_grads, max_halvings=max_halvings
        )
        z = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(x, x0_hat, t, z, sched)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sample at step {s} (t={t})", step=s)
        record_step(trace, s, losses, gate.omega, selected)

    fused = np.clip(from_engine(x), 0.0, 1.0)
    return FusionResult(fused, trace, _final_losses(cset, fused, srcs), gate)
