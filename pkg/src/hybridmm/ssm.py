"""Structured and selective state-space scans, and the Mamba block.

The LTI part works on a single-input single-output system with a diagonal
state matrix stored as a length-N vector:

    A_bar = exp(delta * A)
    B_bar = (delta * A)^-1 (exp(delta * A) - I) * delta * B
    h_t   = A_bar h_{t-1} + B_bar x_t
    y_t   = C h_t
    K     = (C B_bar, C A_bar B_bar, ..., C A_bar^(L-1) B_bar)
    y     = x * K   (causal)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Module, Parameter, RMSNorm, Rng, Tensor, as_tensor, no_grad
from .numerics import functional as F
from .numerics.module import Linear, xavier_uniform


class DomainError(ValueError):
    pass


@dataclass
class SSMParams:
    A: Tensor  # (N,) diagonal of the state matrix
    B: Tensor  # (N,)
    C: Tensor  # (N,)
    delta: Tensor | float

    def __post_init__(self):
        self.A, self.B, self.C = as_tensor(self.A), as_tensor(self.B), as_tensor(self.C)
        self.delta = as_tensor(self.delta)
        if np.any(self.delta.data <= 0):
            raise DomainError(f"delta must be positive, got {self.delta.data}")


@dataclass
class DiscreteSSM:
    A_bar: Tensor  # (N,)
    B_bar: Tensor  # (N,)


def discretize(p: SSMParams) -> DiscreteSSM:
    """Exact zero-order-hold discretization of a diagonal system.

    Entries with A == 0 take the analytic limit B_bar = delta * B.
    """
    if np.any(p.delta.data <= 0):
        raise DomainError(f"delta must be positive, got {p.delta.data}")
    A_bar = F.exp(p.delta * p.A)
    B_bar = F.zoh_gain(p.delta, p.A) * p.B
    return DiscreteSSM(A_bar, B_bar)


def scan_recurrent(d: DiscreteSSM, C, x, h0=None) -> Tensor:
    C, x = as_tensor(C), as_tensor(x)
    h = Tensor(np.zeros(d.A_bar.shape)) if h0 is None else as_tensor(h0)
    if h.shape != d.A_bar.shape:
        raise ValueError(f"h0 has shape {h.shape}, state size is {d.A_bar.shape}")
    ys = []
    for t in range(x.shape[0]):
        h = d.A_bar * h + d.B_bar * x[t]
        ys.append(F.sum(C * h))
    return F.stack(ys)


def kernel(d: DiscreteSSM, C, L: int) -> Tensor:
    """K[k] = C A_bar^k B_bar for k = 0..L-1."""
    if L < 1:
        raise DomainError("kernel length must be >= 1")
    C = as_tensor(C)
    p = d.B_bar
    terms = []
    for _ in range(L):
        terms.append(F.sum(C * p))
        p = d.A_bar * p
    return F.stack(terms)


def scan_convolutional(x, K) -> Tensor:
    """Causal convolution y_t = sum_{k<=t} K[k] x_{t-k}, zero initial state."""
    x, K = as_tensor(x), as_tensor(K)
    L = x.shape[0]
    if K.shape[0] < L:
        raise DomainError(f"kernel length {K.shape[0]} shorter than sequence length {L}")
    lag = np.arange(L)[:, None] - np.arange(L)[None, :]
    causal = (lag >= 0).astype(np.float64)
    toeplitz = F.getitem(K, np.where(lag >= 0, lag, 0)) * causal
    return F.matmul(toeplitz, F.reshape(x, (L, 1))).reshape(L)


# ---------------------------------------------------------------------------
# selective SSM


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Input-dependent (delta, B, C) over ``d`` channels with state size ``n``.

    delta_t = softplus(x_t W_down W_up + b_delta)
    B_t     = x_t W_B + B_fixed
    C_t     = x_t W_C + C_fixed

    ``B_fixed``/``C_fixed`` start at zero; with the projections zeroed they
    turn the layer into a plain LTI system per channel.
    """

    def __init__(self, d: int, n: int, rng: Rng, dt_rank: int | None = None, simplified_b_bar: bool = False):
        self.d, self.n = d, n
        self.dt_rank = dt_rank or max(1, math.ceil(d / 32))
        self.simplified_b_bar = simplified_b_bar
        self.A_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))))
        self.W_B = Parameter(xavier_uniform(rng.child("W_B"), d, n))
        self.W_C = Parameter(xavier_uniform(rng.child("W_C"), d, n))
        self.B_fixed = Parameter(np.zeros(n))
        self.C_fixed = Parameter(np.zeros(n))
        self.W_dt_down = Parameter(xavier_uniform(rng.child("dt_down"), d, self.dt_rank))
        self.W_dt_up = Parameter(xavier_uniform(rng.child("dt_up"), self.dt_rank, d))
        dt0 = rng.child("dt_bias").uniform(1e-3, 1e-1, d)
        self.b_dt = Parameter(_inv_softplus(dt0))

    @property
    def A(self) -> Tensor:
        return -F.exp(self.A_log)

    def projections(self, x) -> tuple[Tensor, Tensor, Tensor]:
        delta = F.softplus(x @ self.W_dt_down @ self.W_dt_up + self.b_dt)
        Bm = x @ self.W_B + self.B_fixed
        Cm = x @ self.W_C + self.C_fixed
        return delta, Bm, Cm

    def __call__(self, x) -> Tensor:
        return selective_scan(self, x)


def selective_scan(p: SelectiveSSM, x, h0=None) -> Tensor:
    """Run the selective SSM over x of shape (L, d) or (batch, L, d)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    delta, Bm, Cm = p.projections(x)
    y = F.selective_scan(x, delta, p.A, Bm, Cm, h0=h0, simplified=p.simplified_b_bar)
    return y.reshape(y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# Mamba block


@dataclass
class MambaCache:
    conv_tail: np.ndarray  # (B, W-1, d_inner) last conv inputs
    h: np.ndarray  # (B, d_inner, N)

    @property
    def nbytes(self) -> int:
        return self.conv_tail.nbytes + self.h.nbytes


class MambaBlock(Module):
    """Pre-norm residual Mamba block.

    norm -> in_proj to (main, gate) -> causal depthwise conv + SiLU on main
    -> selective scan -> * SiLU(gate) -> out_proj -> + residual
    """

    def __init__(
        self,
        d_model: int,
        rng: Rng,
        d_state: int = 8,
        expand: int = 2,
        conv_width: int = 4,
        simplified_b_bar: bool = False,
    ):
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.conv_width = conv_width
        self.norm = RMSNorm(d_model)
        self.in_proj = Linear(d_model, 2 * self.d_inner, rng.child("in_proj"))
        bound = 1.0 / math.sqrt(conv_width)
        self.conv_w = Parameter(rng.child("conv").uniform(-bound, bound, (self.d_inner, conv_width)))
        self.conv_b = Parameter(np.zeros(self.d_inner))
        self.ssm = SelectiveSSM(self.d_inner, d_state, rng.child("ssm"), simplified_b_bar=simplified_b_bar)
        self.out_proj = Linear(self.d_inner, d_model, rng.child("out_proj"))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        xz = self.in_proj(self.norm(x))
        u = xz[..., : self.d_inner]
        z = xz[..., self.d_inner :]
        u = F.silu(F.causal_conv1d(u, self.conv_w, self.conv_b))
        y = self.ssm(u) * F.silu(z)
        out = x + self.out_proj(y)
        return out.reshape(out.shape[1:]) if squeeze else out

    # -- incremental path ----------------------------------------------------
    def empty_cache(self, batch: int) -> MambaCache:
        return MambaCache(
            np.zeros((batch, self.conv_width - 1, self.d_inner)),
            np.zeros((batch, self.d_inner, self.ssm.n)),
        )

    def forward_cached(self, x: np.ndarray, cache: MambaCache) -> np.ndarray:
        """Advance over a chunk (B, c, d) from ``cache``, updating it in place."""
        with no_grad():
            xz = self.in_proj(self.norm(Tensor(x))).data
            u = xz[..., : self.d_inner]
            z = xz[..., self.d_inner :]
            c = u.shape[1]
            W = self.conv_width
            xp = np.concatenate([cache.conv_tail, u], axis=1)
            conv = np.broadcast_to(self.conv_b.data, u.shape).copy()
            w = self.conv_w.data
            for j in range(W):
                conv += xp[:, j : j + c, :] * w[:, j]
            cache.conv_tail = xp[:, xp.shape[1] - (W - 1) :, :].copy()
            u = F.silu(Tensor(conv))
            delta, Bm, Cm = self.ssm.projections(u)
            y, h = F.selective_scan_np(
                u.data, delta.data, self.ssm.A.data, Bm.data, Cm.data, cache.h, self.ssm.simplified_b_bar
            )
            cache.h = h
            y = Tensor(y) * F.silu(Tensor(z))
            return x + self.out_proj(y).data
