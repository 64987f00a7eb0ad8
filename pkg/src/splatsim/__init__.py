"""splatsim: Gaussian-splat soft-tissue reconstruction and MPM simulation."""

from .scene import (AABB, Camera, Frame, Gaussian, MaterialParams, Scene,
                    SceneValidationError, covariance, lame_parameters)
from .config import (ConfigError, OptimConfig, PipelineConfig, RenderConfig,
                     ServiceConfig, SimConfig, load_config)
from .sceneio import (FrameDirectoryError, SceneFormatError, load_frames,
                      load_scene, save_frames, save_scene)
from .renderer import (GaussianGradients, ProjectedGaussian, RenderOutput,
                       project, rasterize, rasterize_arrays, rasterize_backward,
                       rasterize_backward_factored, rasterize_factored)

__version__ = "0.1.0"

__all__ = [
    "AABB", "Camera", "Frame", "Gaussian", "MaterialParams", "Scene",
    "SceneValidationError", "covariance", "lame_parameters",
    "ConfigError", "OptimConfig", "PipelineConfig", "RenderConfig",
    "ServiceConfig", "SimConfig", "load_config",
    "FrameDirectoryError", "SceneFormatError", "load_frames", "load_scene",
    "save_frames", "save_scene",
    "GaussianGradients", "ProjectedGaussian", "RenderOutput", "project",
    "rasterize", "rasterize_arrays", "rasterize_backward",
    "__version__",
]
