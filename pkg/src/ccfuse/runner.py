"""Run a fusion described by a :class:`RunConfig`.

Colour handling:

* ``per_channel``: grayscale sources are broadcast to three channels when
  any source is RGB, and every channel is guided together (one gate
  trajectory for the whole image, since each condition pools over
  channels).
* ``luma``: the luminance of every source is fused; chroma comes from
  the last RGB source as ``rgb - Y_ref + Y_fused``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .config import RunConfig
from .diffusion import FusionResult, GMMDenoiser, OracleDenoiser, make_schedule, sample_fusion, to_engine
from .errors import ShapeMismatch
from .gate import init_gate
from .image import ImageGrid, load_image, to_luma
from .metrics import MetricReport, metric_pair_suite, metric_stats
from .synthetic import make_pair

__all__ = ["RunOutput", "load_sources", "prepare_sources", "build_denoiser", "run_config"]


@dataclass
class RunOutput:
    fused: ImageGrid
    result: FusionResult
    sources: List[np.ndarray]  # what the engine fused, [0, 1]
    report: MetricReport


def load_sources(cfg: RunConfig) -> List[np.ndarray]:
    if cfg.sources.synthetic is not None:
        return list(make_pair(cfg.sources.synthetic, cfg.sources.size))
    return [np.asarray(load_image(p)) for p in cfg.source_paths()]


def _check_sizes(arrs):
    hw = {a.shape[:2] for a in arrs}
    if len(hw) != 1:
        raise ShapeMismatch(f"source sizes differ: {sorted(hw)}")


def prepare_sources(arrs, color: str):
    """Engine inputs in [0, 1] plus the chroma reference (luma mode only)."""
    _check_sizes(arrs)
    rgb = [a for a in arrs if a.shape[2] == 3]
    if not rgb:
        return [np.array(a) for a in arrs], None
    if color == "luma":
        return [to_luma(a) for a in arrs], rgb[-1]
    return [a if a.shape[2] == 3 else np.repeat(a, 3, axis=2) for a in arrs], None


def _match_channels(img, channels):
    if img.shape[2] == channels:
        return img
    return to_luma(img) if channels == 1 else np.repeat(img, 3, axis=2)


def _target_image(cfg, spec, srcs):
    if spec == "midpoint":
        return np.mean(srcs, axis=0)
    img = _match_channels(np.asarray(load_image(cfg.resolve(spec))), srcs[0].shape[2])
    if img.shape != srcs[0].shape:
        raise ShapeMismatch(f"denoiser image {spec!r} has shape {img.shape}, sources {srcs[0].shape}")
    return img


def build_denoiser(cfg: RunConfig, srcs):
    dn = cfg.denoiser
    if dn.kind == "oracle":
        return OracleDenoiser(to_engine(_target_image(cfg, dn.target, srcs)))
    means = [_target_image(cfg, m, srcs) for m in dn.means] if dn.means else srcs
    return GMMDenoiser([to_engine(m) for m in means], variance=dn.variance)


def _report(fused, srcs) -> MetricReport:
    if len(srcs) == 2:
        return metric_pair_suite(fused, srcs[0], srcs[1])
    return MetricReport(metric_stats(fused))


def run_config(cfg: RunConfig, guidance_scale: Optional[float] = None, selection: Optional[str] = None) -> RunOutput:
    """Fuse the configured sources; ``guidance_scale``/``selection`` override the config."""
    raw = load_sources(cfg)
    srcs, chroma_ref = prepare_sources(raw, cfg.color)
    cset = cfg.condition_set(guidance_scale)
    g = cfg.gate
    gate = init_gate(
        len(cset.enhanced),
        k=g.k,
        theta=g.theta,
        lr=g.lr,
        rng_seed=cfg.seed,
        omega_min=g.omega_min,
        eps_l=g.eps_l,
        rank_by_delta=g.rank_by_delta,
    )
    d = cfg.diffusion
    sched = make_schedule(d.T, d.beta_start, d.beta_end)
    result = sample_fusion(
        srcs,
        cset,
        gate,
        build_denoiser(cfg, srcs),
        sched,
        seed=cfg.seed,
        selection=cfg.conditions.selection if selection is None else selection,
        parallel_grads=d.parallel_grads,
        max_halvings=d.max_halvings,
    )
    fused = result.fused
    report = _report(fused, srcs)
    if chroma_ref is not None:
        fused = np.clip(chroma_ref - to_luma(chroma_ref) + fused, 0.0, 1.0)
    return RunOutput(ImageGrid(fused), result, srcs, report)
