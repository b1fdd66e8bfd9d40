"""Nullspace-guided refinement of ViT teacher features for distillation, at desk scale."""

from .tensor import Tensor, no_grad
from .vit import ArtifactPlan, ModelSpec, VitModel, build, inject_artifacts
from .config import RunConfig
from .training import distill, train_teacher

__all__ = [
    "Tensor",
    "no_grad",
    "ArtifactPlan",
    "ModelSpec",
    "VitModel",
    "build",
    "inject_artifacts",
    "RunConfig",
    "distill",
    "train_teacher",
]
