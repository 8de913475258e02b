"""Differentiable tile-based Gaussian rasterizer."""

from .camera import Camera, project, project_covariance, projection_jacobian
from .render import (RenderConfig, RenderInputError, RenderOutput, SplatGrads, SplatInputs, render,
                     render_backward, splat_inputs)

__all__ = [
    "Camera", "project", "project_covariance", "projection_jacobian", "RenderConfig", "RenderInputError",
    "RenderOutput", "SplatGrads", "SplatInputs", "render", "render_backward", "splat_inputs",
]
