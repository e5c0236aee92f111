"""Declarative run configuration (TOML).

A run is fully described by one TOML file::

    task = "vif"            # vif | mef | mff | custom
    seed = 0
    color = "per_channel"   # per_channel | luma

    [sources]
    paths = ["ir.png", "vis.png"]     # or: synthetic = "complementary", size = 64

    [output]
    fused = "out/fused.png"
    trace = "out/trace.csv"
    metrics = "out/metrics.json"

    [diffusion]
    T = 100
    beta_start = 1e-4
    beta_end = 0.02
    guidance_scale = 1.0
    parallel_grads = false
    max_halvings = 20

    [conditions]
    enhanced = ["ssim", "mse", "edge", "lf", "hf", "sf", "ei", "sd"]
    task_specific = []
    selection = "scs"                 # scs | all | none
    [conditions.eta]                  # basic-condition weights
    [conditions.params.hf]            # per-condition overrides
    lam_h = 0.5

    [gate]
    k = 3
    theta = 1.0
    lr = 0.1

    [denoiser]
    kind = "gmm"                      # gmm | oracle
    variance = 0.01                   # gmm component variance (engine units)
    # means = ["a.png", "b.png"]      # gmm means, default: the sources
    # target = "midpoint"             # oracle target: a path or "midpoint"

Relative paths are resolved against the directory holding the config
file. Parsing then emitting a config is lossless.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import tomli_w

from .conditions import BASIC, DEFAULT_PARAMS, ENHANCED, ENHANCED_DEFAULT, TASK_SPECIFIC, ConditionSet, ConditionSpec
from .errors import CCFError, ConfigError, IoError
from .synthetic import PAIR_KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "RunConfig",
    "SourcesConfig",
    "OutputConfig",
    "DiffusionConfig",
    "ConditionsConfig",
    "GateConfig",
    "DenoiserConfig",
    "load_config",
    "parse_config",
    "TASKS",
]

TASKS = ("vif", "mef", "mff", "custom")
COLOR_MODES = ("per_channel", "luma")
SELECTION_MODES = ("scs", "all", "none")


@dataclass
class SourcesConfig:
    paths: List[str] = field(default_factory=list)
    synthetic: Optional[str] = None
    size: int = 64


@dataclass
class OutputConfig:
    fused: str = "fused.png"
    trace: str = "trace.csv"
    metrics: str = "metrics.json"


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    guidance_scale: float = 1.0
    parallel_grads: bool = False
    max_halvings: int = 20


@dataclass
class ConditionsConfig:
    enhanced: List[str] = field(default_factory=lambda: list(ENHANCED_DEFAULT))
    task_specific: List[str] = field(default_factory=list)
    selection: str = "scs"
    eta: Dict[str, float] = field(default_factory=dict)
    params: Dict[str, Dict[str, Any]] = field(default_factory=dict)


@dataclass
class GateConfig:
    k: int = 3
    theta: float = 1.0
    lr: float = 0.1
    omega_min: float = 1e-3
    eps_l: float = 1e-12
    rank_by_delta: bool = False


@dataclass
class DenoiserConfig:
    kind: str = "gmm"
    variance: float = 0.01
    means: List[str] = field(default_factory=list)
    target: Optional[str] = None


@dataclass
class RunConfig:
    seed: int
    task: str = "vif"
    color: str = "per_channel"
    sources: SourcesConfig = field(default_factory=SourcesConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    conditions: ConditionsConfig = field(default_factory=ConditionsConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.validate()

    # -- paths ---------------------------------------------------------

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def source_paths(self) -> List[Path]:
        return [self.resolve(p) for p in self.sources.paths]

    # -- validation ----------------------------------------------------

    def validate(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.color not in COLOR_MODES:
            raise ConfigError(f"color must be one of {COLOR_MODES}, got {self.color!r}")
        src = self.sources
        if src.synthetic is not None:
            if src.paths:
                raise ConfigError("give either sources.paths or sources.synthetic, not both")
            if src.synthetic not in PAIR_KINDS:
                raise ConfigError(f"sources.synthetic must be one of {sorted(PAIR_KINDS)}")
            if src.size < 4 or src.size % 2:
                raise ConfigError("sources.size must be an even integer >= 4")
        elif len(src.paths) < 2:
            raise ConfigError("at least two source paths are required")
        outs = [self.output.fused, self.output.trace, self.output.metrics]
        resolved = [str(self.resolve(p)) for p in list(src.paths) + outs]
        if len(set(resolved)) != len(resolved):
            raise ConfigError("source and output paths must all be distinct")

        d = self.diffusion
        if isinstance(d.T, bool) or not isinstance(d.T, int) or d.T < 1:
            raise ConfigError("diffusion.T must be an integer >= 1")
        if not 0 < d.beta_start <= d.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if d.guidance_scale < 0:
            raise ConfigError("diffusion.guidance_scale must be non-negative")
        if d.max_halvings < 0:
            raise ConfigError("diffusion.max_halvings must be non-negative")

        c = self.conditions
        if c.selection not in SELECTION_MODES:
            raise ConfigError(f"conditions.selection must be one of {SELECTION_MODES}")
        for cid in list(c.enhanced) + list(c.task_specific) + list(c.eta) + list(c.params):
            if cid not in DEFAULT_PARAMS:
                raise ConfigError(f"unknown condition id {cid!r}")
        if self.gate.k > len(c.enhanced) or self.gate.k < 0:
            raise ConfigError(f"gate.k={self.gate.k} must lie in [0, {len(c.enhanced)}]")
        if not 0 < self.gate.omega_min < 1:
            raise ConfigError("gate.omega_min must lie in (0, 1)")

        dn = self.denoiser
        if dn.kind not in ("gmm", "oracle"):
            raise ConfigError("denoiser.kind must be 'gmm' or 'oracle'")
        if dn.kind == "oracle" and not dn.target:
            raise ConfigError("oracle denoiser needs denoiser.target (a path or 'midpoint')")
        if dn.variance < 0:
            raise ConfigError("denoiser.variance must be non-negative")
        # surfaces bad per-condition parameters early
        try:
            self.condition_set()
        except CCFError as exc:
            raise ConfigError(str(exc)) from None

    # -- conversion ----------------------------------------------------

    def basic_ids(self) -> List[str]:
        return ["mse"] if self.task in ("vif", "custom") else ["mse_pyramid", "hf", "lf", "edge"]

    def condition_set(self, guidance_scale: Optional[float] = None) -> ConditionSet:
        c = self.conditions

        def spec(cid, cat):
            return ConditionSpec(cid, cat, {k: float(v) for k, v in c.params.get(cid, {}).items()})

        basic = tuple((spec(cid, BASIC), float(c.eta.get(cid, 1.0))) for cid in self.basic_ids())
        return ConditionSet(
            basic=basic,
            enhanced=tuple(spec(cid, ENHANCED) for cid in c.enhanced),
            task_specific=tuple(spec(cid, TASK_SPECIFIC) for cid in c.task_specific),
            guidance_scale=self.diffusion.guidance_scale if guidance_scale is None else guidance_scale,
        )

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"task": self.task, "seed": self.seed, "color": self.color}
        for f in fields(self):
            if f.name in out or f.name == "base_dir":
                continue
            section = {k: v for k, v in asdict(getattr(self, f.name)).items() if v is not None}
            out[f.name] = section
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


_SECTIONS = {
    "sources": SourcesConfig,
    "output": OutputConfig,
    "diffusion": DiffusionConfig,
    "conditions": ConditionsConfig,
    "gate": GateConfig,
    "denoiser": DenoiserConfig,
}
_FLOAT_FIELDS = {"beta_start", "beta_end", "guidance_scale", "theta", "lr", "omega_min", "eps_l", "variance"}


def _build_section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")
    kw = {}
    for k, v in raw.items():
        if k in _FLOAT_FIELDS and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    return cls(**kw)


def parse_config(text: str, base_dir=".") -> RunConfig:
    """Build a RunConfig from TOML text; relative paths resolve against ``base_dir``."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    if "seed" not in raw:
        raise ConfigError("seed is required (runs never draw implicit entropy)")
    top = {"seed", "task", "color"}
    extra = set(raw) - top - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")
    kw = {k: raw[k] for k in top if k in raw}
    for name, cls in _SECTIONS.items():
        kw[name] = _build_section(name, cls, raw.get(name, {}))
    try:
        return RunConfig(base_dir=Path(base_dir), **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, base_dir=path.parent)
