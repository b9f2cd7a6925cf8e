"""Single-stage 3D Gaussian diffusion at desk scale.

A splatting rasterizer with analytic gradients, a small reverse-mode tensor
engine, a transformer denoiser that predicts pixel-aligned Gaussians, an
ancestral/DDIM sampler, a synthetic data pipeline and the training loop.
"""
from .camera import CameraPose, ViewConstraints, look_at
from .data import DataConfig, gen_object, gen_scene, load_dataset, select_views, write_dataset
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .errors import ConstraintsUnsatisfiableError, ContractError, NonFiniteLossError
from .gaussians import GaussianCloud, export_ply, import_ply
from .raster import BACKEND, RenderConfig, render, render_backward
from .trainer import TrainConfig, Trainer, evaluate, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CameraPose",
    "ConstraintsUnsatisfiableError",
    "ContractError",
    "DataConfig",
    "Denoiser",
    "DenoiserConfig",
    "GaussianCloud",
    "NoiseSchedule",
    "NonFiniteLossError",
    "RenderConfig",
    "SamplerConfig",
    "TrainConfig",
    "Trainer",
    "ViewConstraints",
    "evaluate",
    "export_ply",
    "gen_object",
    "gen_scene",
    "import_ply",
    "load_dataset",
    "load_model",
    "look_at",
    "render",
    "render_backward",
    "sample",
    "save_model",
    "select_views",
    "write_dataset",
]
