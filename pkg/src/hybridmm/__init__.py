"""Hybrid attention/Mamba multimodal model at desk scale."""

from .layers import ConfigError, HybridModel, StackSpec, build_stack, model_forward
from .ssm import DomainError, MambaBlock, SelectiveSSM, SSMParams, discretize, kernel, scan_convolutional, scan_recurrent

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "HybridModel", "MambaBlock", "SSMParams", "SelectiveSSM", "StackSpec",
    "build_stack", "discretize", "kernel", "model_forward", "scan_convolutional", "scan_recurrent",
]
