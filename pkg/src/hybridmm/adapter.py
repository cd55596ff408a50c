"""Learnable modality adapters: visual feature width → model width."""

from __future__ import annotations

import numpy as np

from .layers import ConfigError
from .numerics import Linear, Module, Parameter, Rng, Tensor, as_tensor
from .numerics import functional as F
from .numerics.module import xavier_uniform


class MLPAdapter(Module):
    """Two linear maps with a GELU between, applied per token."""

    def __init__(self, d_in: int, d_model: int, rng: Rng, hidden: int | None = None):
        hidden = hidden or d_model
        self.fc1 = Linear(d_in, hidden, rng.child("fc1"), bias=True)
        self.fc2 = Linear(hidden, d_model, rng.child("fc2"), bias=True)

    def __call__(self, feats) -> Tensor:
        return self.fc2(F.gelu(self.fc1(feats)))


def adapt_image(p: MLPAdapter, feats) -> Tensor:
    return p(as_tensor(feats))


class ConvAdapter(Module):
    """k x k / stride s convolution over each frame's patch grid."""

    def __init__(self, d_in: int, d_model: int, rng: Rng, kernel: int = 2, stride: int = 2):
        if kernel < 1 or stride < 1:
            raise ConfigError("kernel and stride must be positive")
        self.kernel, self.stride = kernel, stride
        fan_in = kernel * kernel * d_in
        self.weight = Parameter(xavier_uniform(rng.child("weight"), fan_in, d_model))
        self.bias = Parameter(np.zeros(d_model))

    def tokens_per_frame(self, grid: int) -> int:
        return ((grid - self.kernel) // self.stride + 1) ** 2

    def __call__(self, frame_feats) -> Tensor:
        x = as_tensor(frame_feats)  # (n, g, g, C)
        if self.kernel > x.shape[1] or self.kernel > x.shape[2]:
            raise ConfigError(f"kernel {self.kernel} larger than patch grid {x.shape[1]}x{x.shape[2]}")
        cols = F.unfold2d(x, self.kernel, self.stride)  # (n, Ho, Wo, k*k*C)
        n, Ho, Wo, _ = cols.shape
        y = cols @ self.weight + self.bias
        return y.reshape(n * Ho * Wo, y.shape[-1])


def adapt_video(p: ConvAdapter, frame_feats) -> Tensor:
    """Convolve frames independently; flatten row-major, frames in temporal order."""
    return p(frame_feats)
