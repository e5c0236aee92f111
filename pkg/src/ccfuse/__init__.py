"""Guided-diffusion image fusion with sampling-adaptive condition selection.

A DDPM sampler edits its clean-image estimate at every reverse step with
gradients of differentiable fusion conditions. A small gate decides which
of the optional conditions are applied at each step.
"""

from .conditions import (
    BASIC,
    ENHANCED,
    ENHANCED_DEFAULT,
    TASK_SPECIFIC,
    ConditionSet,
    ConditionSpec,
    combined_loss,
    default_condition_set,
    eval_condition,
    known_conditions,
)
from .config import RunConfig, load_config, parse_config
from .diffusion import (
    FusionResult,
    GMMDenoiser,
    NoiseSchedule,
    OracleDenoiser,
    estimate_x0,
    forward_marginal,
    from_engine,
    guided_correction,
    make_schedule,
    predict_noise,
    reverse_step,
    sample_fusion,
    to_engine,
)
from .errors import *  # noqa: F401,F403
from .gate import GateState, SelectionTrace, gate_update, init_gate, project_omega, select_topk
from .image import ImageGrid, load_image, save_image, to_luma
from .metrics import MetricReport, metric_pair_suite, metric_ssim, metric_stats
from .runner import run_config
from .signal_ops import WaveletPyramid, haar_dwt, haar_idwt, sobel_adjoint, sobel_grad
from .synthetic import make_pair

__version__ = "0.1.0"
