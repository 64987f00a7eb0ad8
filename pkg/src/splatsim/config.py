"""Configuration dataclasses and config.json loading.

Every field is optional in the file; precedence is CLI flag > config.json >
built-in default. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .scene import MaterialParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    low_pass: float = 0.3            # pixels^2 added to the 2D covariance diagonal
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 1.0
    transmittance_min: float = 1e-4
    near_plane: float = 0.01
    footprint_sigmas: float = 3.0
    normalize_depth: bool = False    # divide rendered depth by accumulated alpha
    backward_chunks: int = 16        # fixed reduction chunks, thread-count independent


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 7000
    eta: float = 0.3                 # depth-loss weight
    huber_delta: float = 0.2
    gamma: float = 10.0              # anisotropy prune threshold on max/min scale
    mask_depth: bool = True          # gate the depth term by the tool mask
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 5000
    densify_split_fraction: float = 0.01   # of scene extent: larger Gaussians split
    opacity_prune_threshold: float = 0.005
    init_target_points: int = 50000
    init_coverage_gain: float = 0.2  # extra frames must add this fraction of new pixels
    psnr_interval: int = 250

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.gamma <= 1:
            raise ConfigError("gamma must be > 1")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")


@dataclass(frozen=True)
class SimConfig:
    substeps: int = 80
    dt: float = 0.0005
    grid_resolution: int = 64        # cells along the longest bounds axis
    padding_resolution: int = 100    # opacity-field lattice per axis
    tau: float = 0.1                 # padding occluder threshold
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    damping: float = 0.0             # grid velocity decay rate, 1/s
    boundary: str = "sticky"         # default for all six faces: sticky | free
    boundary_width: int = 2          # sticky shell thickness in cells
    det_floor: float = 1e-4          # deformation-gradient inversion guard trigger
    sig_clamp: tuple[float, float] = (0.05, 4.0)

    def __post_init__(self):
        if self.dt <= 0 or self.substeps < 0:
            raise ConfigError("dt must be > 0 and substeps >= 0")
        if self.boundary not in ("sticky", "free"):
            raise ConfigError("boundary must be 'sticky' or 'free'")
        if self.grid_resolution < 8 or self.padding_resolution < 4:
            raise ConfigError("grid resolutions too small")


@dataclass(frozen=True)
class ServiceConfig:
    port: int = 8765
    host: str = "127.0.0.1"
    max_steps_per_sec: float = 30.0
    render_width: int = 640
    render_height: int = 512


@dataclass(frozen=True)
class PipelineConfig:
    material: MaterialParams = field(default_factory=MaterialParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


_SECTIONS = {"material": MaterialParams, "optim": OptimConfig, "render": RenderConfig,
             "sim": SimConfig, "service": ServiceConfig}


def _build(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    parts = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return PipelineConfig(**parts)


def load_config(path=None) -> PipelineConfig:
    """Parse config.json (or return all defaults when path is None)."""
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return config_from_dict(doc)


def apply_overrides(cfg: PipelineConfig, **sections) -> PipelineConfig:
    """Functionally replace fields, e.g. apply_overrides(cfg, optim={'eta': 0})."""
    parts = {}
    for name in _SECTIONS:
        overrides = {k: v for k, v in (sections.get(name) or {}).items() if v is not None}
        current = getattr(cfg, name)
        parts[name] = dataclasses.replace(current, **overrides) if overrides else current
    return PipelineConfig(**parts)
