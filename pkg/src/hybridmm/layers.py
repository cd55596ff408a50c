"""Attention and MoE sublayers and the hybrid attention/Mamba stack."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Parameter, RMSNorm, Rng, Tensor, as_tensor, no_grad
from .numerics import functional as F
from .ssm import DomainError, MambaBlock, MambaCache


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feed-forward sublayers


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: Rng):
        self.w1 = Linear(d_model, d_ff, rng.child("w1"))
        self.w2 = Linear(d_ff, d_model, rng.child("w2"))

    def __call__(self, x) -> Tensor:
        return self.w2(F.silu(self.w1(x)))


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


class MoE(Module):
    """Top-k routed mixture of SiLU feed-forward experts.

    The softmax runs over the selected logits only, so selected weights sum
    to one. Each expert only sees the tokens routed to it.
    """

    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int, rng: Rng, aux_coef: float = 0.0):
        if not 1 <= top_k <= n_experts:
            raise ConfigError(f"top_k must be in [1, {n_experts}], got {top_k}")
        self.n_experts = n_experts
        self.top_k = top_k
        self.aux_coef = aux_coef
        self.router = Linear(d_model, n_experts, rng.child("router"))
        self.experts = [FeedForward(d_model, d_ff, rng.child(f"expert{e}")) for e in range(n_experts)]
        self.aux_loss: Tensor | None = None
        self.last_weights: np.ndarray | None = None

    def gate(self, x) -> tuple[Tensor, np.ndarray]:
        logits = self.router(x)
        sel = top_k_indices(logits.data, self.top_k)
        mask = np.full(logits.shape, -np.inf)
        np.put_along_axis(mask, sel, 0.0, axis=-1)
        return F.softmax(logits + mask, axis=-1), sel

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        T = flat.shape[0]
        weights, sel = self.gate(flat)
        self.last_weights = weights.data
        out = None
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((sel == e).any(axis=-1))[0]
            if rows.size == 0:
                continue
            y = expert(flat[rows]) * weights[rows, e : e + 1]
            y = F.index_add(T, rows, y)
            out = y if out is None else out + y
        if self.aux_coef > 0:
            # switch-style balance term: E * sum_e (fraction routed to e) * (mean router prob of e)
            probs = F.softmax(self.router(flat), axis=-1)
            frac = np.bincount(sel.reshape(-1), minlength=self.n_experts) / sel.size
            self.aux_loss = F.sum(F.mean(probs, axis=0) * frac) * float(self.n_experts)
        if out is None:
            out = Tensor(np.zeros(flat.shape))
        return out.reshape(shape)


# ---------------------------------------------------------------------------
# attention


def rotary(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over the last axis of (..., L, dh)."""
    L, dh = x.shape[-2], x.shape[-1]
    half = dh // 2
    freq = base ** (-np.arange(half) / half)
    ang = (offset + np.arange(L))[:, None] * freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[..., :half], x[..., half : 2 * half]
    return F.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


@dataclass
class KVCache:
    """Preallocated key/value buffers (B, H, capacity, dh) that grow by doubling."""

    k: np.ndarray
    v: np.ndarray
    length: int = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[2]
        need = self.length + n
        if need > self.k.shape[2]:
            cap = max(need, 2 * self.k.shape[2])
            grow = lambda a: np.concatenate(  # noqa: E731
                [a[:, :, : self.length], np.zeros(a.shape[:2] + (cap - self.length, a.shape[3]))], axis=2
            )
            self.k, self.v = grow(self.k), grow(self.v)
        self.k[:, :, self.length : need] = k
        self.v[:, :, self.length : need] = v
        self.length = need

    @property
    def keys(self) -> np.ndarray:
        return self.k[:, :, : self.length]

    @property
    def values(self) -> np.ndarray:
        return self.v[:, :, : self.length]

    @property
    def nbytes(self) -> int:
        B, H, _, dh = self.k.shape
        return 2 * B * H * self.length * dh * self.k.itemsize


class AttentionLayer(Module):
    """Pre-norm causal self-attention followed by a pre-norm feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn: Module | None, rng: Rng, rope: bool = False):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.rope = rope
        self.norm = RMSNorm(d_model)
        self.wq = Linear(d_model, d_model, rng.child("wq"))
        self.wk = Linear(d_model, d_model, rng.child("wk"))
        self.wv = Linear(d_model, d_model, rng.child("wv"))
        self.wo = Linear(d_model, d_model, rng.child("wo"))
        self.ffn_norm = RMSNorm(d_model) if ffn is not None else None
        self.ffn = ffn

    def _heads(self, t: Tensor) -> Tensor:
        B, L, _ = t.shape
        return t.reshape(B, L, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, t: Tensor) -> Tensor:
        B, H, L, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def attention(self, x) -> Tensor:
        h = self.norm(x)
        q, k, v = self._heads(self.wq(h)), self._heads(self.wk(h)), self._heads(self.wv(h))
        if self.rope:
            q, k = rotary(q), rotary(k)
        return self.wo(self._merge(F.causal_attention(q, k, v)))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        x = x + self.attention(x)
        if self.ffn is not None:
            x = x + self.ffn(self.ffn_norm(x))
        return x.reshape(x.shape[1:]) if squeeze else x

    def empty_cache(self, batch: int, capacity: int = 64) -> KVCache:
        shape = (batch, self.n_heads, capacity, self.d_head)
        return KVCache(np.zeros(shape), np.zeros(shape))

    def forward_cached(self, x: np.ndarray, cache: KVCache) -> np.ndarray:
        with no_grad():
            xt = Tensor(x)
            h = self.norm(xt)
            q, k, v = self._heads(self.wq(h)), self._heads(self.wk(h)), self._heads(self.wv(h))
            offset = cache.length
            if self.rope:
                q, k = rotary(q, offset), rotary(k, offset)
            cache.append(k.data, v.data)
            a = F.attend(q.data, cache.keys, cache.values, offset)
            xt = xt + self.wo(self._merge(Tensor(a)))
            if self.ffn is not None:
                xt = xt + self.ffn(self.ffn_norm(xt))
            return xt.data


class MambaLayer(Module):
    """Mamba block, with an optional feed-forward sublayer (used when the
    layer index is listed as an MoE position)."""

    def __init__(self, block: MambaBlock, ffn: Module | None):
        self.block = block
        self.ffn_norm = RMSNorm(block.d_model) if ffn is not None else None
        self.ffn = ffn

    def __call__(self, x) -> Tensor:
        x = self.block(x)
        if self.ffn is not None:
            x = x + self.ffn(self.ffn_norm(x))
        return x

    def empty_cache(self, batch: int, capacity: int = 0) -> MambaCache:
        return self.block.empty_cache(batch)

    def forward_cached(self, x: np.ndarray, cache: MambaCache) -> np.ndarray:
        y = self.block.forward_cached(x, cache)
        if self.ffn is not None:
            with no_grad():
                yt = Tensor(y)
                y = (yt + self.ffn(self.ffn_norm(yt))).data
        return y


# ---------------------------------------------------------------------------
# stack


@dataclass
class StackSpec:
    pattern: str = "AMMM"
    moe_positions: frozenset[int] | None = None  # None: every attention layer
    d_model: int = 64
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    d_ff: int | None = None  # None: 2 * d_model
    d_state: int = 8
    vocab: int = 64
    tied: bool = True
    rope: bool = False
    expand: int = 2
    conv_width: int = 4
    simplified_b_bar: bool = False
    moe_aux_coef: float = 0.0

    def __post_init__(self):
        if not self.pattern:
            raise ConfigError("pattern must be non-empty")
        bad = set(self.pattern) - {"A", "M"}
        if bad:
            raise ConfigError(f"invalid pattern character(s) {sorted(bad)} in {self.pattern!r}")
        if self.moe_positions is None:
            self.moe_positions = frozenset(i for i, c in enumerate(self.pattern) if c == "A")
        else:
            self.moe_positions = frozenset(int(i) for i in self.moe_positions)
        out = [i for i in self.moe_positions if not 0 <= i < len(self.pattern)]
        if out:
            raise ConfigError(f"moe_positions {sorted(out)} outside 0..{len(self.pattern) - 1}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must be in [1, n_experts={self.n_experts}]")

    @property
    def depth(self) -> int:
        return len(self.pattern)

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 2 * self.d_model


class HybridModel(Module):
    def __init__(self, spec: StackSpec, rng: Rng):
        self.spec = spec
        d = spec.d_model
        # unit-variance rows keep token identity on the scale of the sublayer
        # outputs; the tied head divides by sqrt(d) to compensate
        self.embed = Parameter(rng.child("embed").normal(0.0, 1.0, (spec.vocab, d)))
        self.layers = []
        for i, kind in enumerate(spec.pattern):
            lr = rng.child(f"layer{i}")
            ffn = None
            if i in spec.moe_positions:
                ffn = MoE(d, spec.ffn_width, spec.n_experts, spec.top_k, lr.child("moe"), spec.moe_aux_coef)
            elif kind == "A":
                ffn = FeedForward(d, spec.ffn_width, lr.child("ffn"))
            if kind == "A":
                self.layers.append(AttentionLayer(d, spec.n_heads, ffn, lr, rope=spec.rope))
            else:
                block = MambaBlock(
                    d, lr, d_state=spec.d_state, expand=spec.expand,
                    conv_width=spec.conv_width, simplified_b_bar=spec.simplified_b_bar,
                )
                self.layers.append(MambaLayer(block, ffn))
        self.final_norm = RMSNorm(d)
        self.head = None if spec.tied else Linear(d, spec.vocab, rng.child("head"))

    @property
    def kinds(self) -> str:
        return "".join("A" if isinstance(l, AttentionLayer) else "M" for l in self.layers)

    def check_ids(self, tokens: np.ndarray) -> None:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab):
            raise DomainError(f"token id outside vocabulary of size {self.spec.vocab}")

    def embed_tokens(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        self.check_ids(tokens)
        return F.embedding(self.embed, tokens)

    def logits(self, h) -> Tensor:
        h = self.final_norm(h)
        if self.head is None:
            return (h @ self.embed.T) * (1.0 / math.sqrt(self.spec.d_model))
        return self.head(h)

    def __call__(self, tokens, visual_embeds=None, return_hidden: bool = False):
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        x = self.embed_tokens(tokens)
        if visual_embeds is not None:
            v = as_tensor(visual_embeds)
            if v.ndim == 2:
                v = v.reshape(1, *v.shape)
            if v.shape[0] != x.shape[0]:
                v = F.concat([v] * x.shape[0], axis=0) if v.shape[0] == 1 else v
            x = F.concat([v, x], axis=1)
        hidden = []
        for layer in self.layers:
            x = layer(x)
            if return_hidden:
                hidden.append(x.data)
        out = self.logits(x)
        if squeeze:
            out = out.reshape(out.shape[1:])
        return (out, hidden) if return_hidden else out

    def aux_loss(self) -> Tensor | None:
        total = None
        for layer in self.layers:
            moe = layer.ffn if isinstance(layer.ffn, MoE) else None
            if moe is not None and moe.aux_loss is not None:
                term = moe.aux_loss * moe.aux_coef
                total = term if total is None else total + term
        return total


def build_stack(spec: StackSpec, rng: Rng) -> HybridModel:
    return HybridModel(spec, rng)


def model_forward(m: HybridModel, tokens, visual_embeds=None) -> Tensor:
    return m(tokens, visual_embeds)
