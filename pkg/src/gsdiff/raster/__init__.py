"""Differentiable Gaussian splatting.

The per-pixel blending loop runs in a compiled Cython module when it has been
built, otherwise in a numpy implementation with identical semantics. Set
``GSDIFF_PURE_PYTHON=1`` to force the fallback.
"""
from .projection import Projection, ProjectedGaussian, ewa_covariance, project, projection_jacobian
from .render import (
    BACKEND,
    RenderConfig,
    RenderGradients,
    RenderOutput,
    available_backends,
    footprint_radius,
    render,
    render_backward,
    render_naive,
)

__all__ = [
    "BACKEND",
    "Projection",
    "ProjectedGaussian",
    "RenderConfig",
    "RenderGradients",
    "RenderOutput",
    "available_backends",
    "ewa_covariance",
    "footprint_radius",
    "project",
    "projection_jacobian",
    "render",
    "render_backward",
    "render_naive",
]
