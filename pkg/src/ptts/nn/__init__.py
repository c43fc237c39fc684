"""Minimal differentiable compute layer (numpy, reverse mode)."""
from . import autograd as ops
from .autograd import GraphError, Tensor, no_grad
from .checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, relative_error
from .layers import BiGRU, Conv1d, ConvBank, Dense, GRU, Module, Parameter
from .optim import Adam, StepSchedule

__all__ = [
    "Adam", "BiGRU", "CheckpointError", "Conv1d", "ConvBank", "Dense", "GRU", "GraphError",
    "Module", "Parameter", "StepSchedule", "Tensor", "check_gradients", "config_hash",
    "load_checkpoint", "no_grad", "ops", "relative_error", "save_checkpoint",
]
