"""Desk-scale laboratory for transformer knowledge distillation."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .losses import LossConfig, ProjectionParams, transformer_layer_loss
from .mapping import BlockPartition, MappingKind, MappingState
from .model import ModelConfig, forward_with_trace, init_params, predict
from .pipeline import RunConfig, run_experiment

__version__ = "0.1.0"
