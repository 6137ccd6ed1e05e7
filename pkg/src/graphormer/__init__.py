"""Graph-convolution-reinforced transformer for articulated-mesh regression."""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor, backward, grad_check
from .config import GraphormerConfig, desk_preset, paper_faithful_preset
from .mesh import (
    MeshSample,
    TemplateMesh,
    build_coarsening,
    build_normalized_adjacency,
    build_token_graph,
    forward_kinematics,
    generate_dataset,
    generate_synthetic_template,
)
from .model import GraphormerModel, ModelOutput, count_params, flops_estimate
from .train import (
    LossWeights,
    adam_step,
    compute_losses,
    lr_schedule,
    metrics,
    procrustes_align,
    sample_mask_plan,
    train_loop,
)
from .estimator import GraphormerMeshRegressor

__all__ = [
    "GradTape",
    "Tensor",
    "backward",
    "grad_check",
    "GraphormerConfig",
    "desk_preset",
    "paper_faithful_preset",
    "MeshSample",
    "TemplateMesh",
    "build_coarsening",
    "build_normalized_adjacency",
    "build_token_graph",
    "forward_kinematics",
    "generate_dataset",
    "generate_synthetic_template",
    "GraphormerModel",
    "ModelOutput",
    "count_params",
    "flops_estimate",
    "LossWeights",
    "adam_step",
    "compute_losses",
    "lr_schedule",
    "metrics",
    "procrustes_align",
    "sample_mask_plan",
    "train_loop",
    "GraphormerMeshRegressor",
]
