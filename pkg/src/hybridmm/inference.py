"""Cached autoregressive generation and the prefill/decode efficiency sweep.

Attention layers keep a growing key/value cache; Mamba layers keep a
fixed-size convolution tail and recurrent state. ``prefill`` pushes the
prompt through in chunks, ``decode_step`` advances one token.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .layers import AttentionLayer, ConfigError, HybridModel, KVCache, StackSpec, build_stack
from .numerics import Rng, Tensor, no_grad
from .numerics import functional as F
from .ssm import DomainError, MambaCache
from .vision import count_visual_tokens

CSV_COLUMNS = (
    "config", "pattern", "d_model", "context_tokens", "repeat",
    "first_token_latency_s", "throughput_tok_per_s", "cache_bytes",
)


@dataclass
class GenerationState:
    caches: list  # KVCache per attention layer, MambaCache per Mamba layer
    position: int = 0
    prefill_ns: int = 0
    step_ns: list[int] = field(default_factory=list)
    peak_cache_bytes: int = 0

    @property
    def cache_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches)

    def attention_lengths(self) -> list[int]:
        return [c.length for c in self.caches if isinstance(c, KVCache)]

    def mamba_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches if isinstance(c, MambaCache))

    def _track(self) -> None:
        self.peak_cache_bytes = max(self.peak_cache_bytes, self.cache_bytes)


@dataclass
class BenchResult:
    config: str
    pattern: str
    d_model: int
    context_tokens: int
    first_token_latency_s: float
    throughput_tok_per_s: float
    cache_bytes: int
    repeat: int | str = 0
    failed: bool = False
    error: str = ""

    def csv_row(self) -> list:
        if self.failed:
            return [self.config, self.pattern, self.d_model, self.context_tokens, "failed", "", "", ""]
        return [
            self.config, self.pattern, self.d_model, self.context_tokens, self.repeat,
            f"{self.first_token_latency_s:.6e}", f"{self.throughput_tok_per_s:.6e}", self.cache_bytes,
        ]

    def line(self) -> str:
        return (f"[{self.config}] context={self.context_tokens} first_token_latency={self.first_token_latency_s:.4f}s "
                f"throughput={self.throughput_tok_per_s:.2f} tok/s cache={self.cache_bytes} B")


def _last_logits(model: HybridModel, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.logits(Tensor(x[:, -1:, :])).data[0, -1]


def _run_layers(model: HybridModel, x: np.ndarray, caches: list) -> np.ndarray:
    for layer, cache in zip(model.layers, caches):
        x = layer.forward_cached(x, cache)
    return x


def prefill(model: HybridModel, prompt=None, visual_embeds=None, chunk: int = 512,
            embeds: np.ndarray | None = None) -> tuple[GenerationState, np.ndarray]:
    """Run the prompt (visual prefix, then token ids) through every layer once.

    ``embeds`` bypasses the token embedding with a ready (L, d) sequence.
    Returns the state and the logits for the token after the prompt.
    """
    parts = []
    if visual_embeds is not None:
        v = np.asarray(visual_embeds.data if isinstance(visual_embeds, Tensor) else visual_embeds, dtype=np.float64)
        parts.append(v.reshape(-1, v.shape[-1]))
    if prompt is not None and len(prompt):
        with no_grad():
            parts.append(model.embed_tokens(np.asarray(prompt, dtype=np.int64)).data)
    if embeds is not None:
        parts.append(np.asarray(embeds, dtype=np.float64))
    if not parts or sum(len(p) for p in parts) == 0:
        raise DomainError("prefill needs a non-empty prompt")
    x = np.concatenate(parts)[None]
    L = x.shape[1]
    cap = 1 << max(6, math.ceil(math.log2(L + 1)))
    caches = [
        layer.empty_cache(1, cap) if isinstance(layer, AttentionLayer) else layer.empty_cache(1)
        for layer in model.layers
    ]
    state = GenerationState(caches)
    t0 = time.perf_counter_ns()
    outs = [_run_layers(model, x[:, s : s + chunk], caches) for s in range(0, L, chunk)]
    logits = _last_logits(model, outs[-1])
    state.prefill_ns = time.perf_counter_ns() - t0
    state.position = L
    state._track()
    return state, logits


def decode_step(model: HybridModel, state: GenerationState, token: int) -> np.ndarray:
    """Advance one token from cached state; returns next-token logits."""
    with no_grad():
        x = model.embed_tokens(np.array([[token]], dtype=np.int64)).data
    x = _run_layers(model, x, state.caches)
    state.position += 1
    state._track()
    return _last_logits(model, x)


def sample_token(logits: np.ndarray, temperature: float = 0.0, rng: Rng | None = None) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError("temperature sampling needs a seeded rng")
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.gen.choice(len(p), p=p))


def generate(model: HybridModel, prompt=None, n_tokens: int = 16, temperature: float = 0.0, seed: int = 0,
             visual_embeds=None, embeds=None, chunk: int = 512, config_id: str = "") -> tuple[list[int], BenchResult]:
    """Sample ``n_tokens`` tokens.

    Each timed step picks a token from the current logits and feeds it back
    through ``decode_step``. First-token latency is prefill plus the first
    step; throughput counts steps only.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    rng = Rng(seed).child("sampling")
    state, logits = prefill(model, prompt, visual_embeds, chunk, embeds)
    context = state.position
    out = []
    for _ in range(n_tokens):
        t0 = time.perf_counter_ns()
        tok = sample_token(logits, temperature, rng)
        logits = decode_step(model, state, tok)
        state.step_ns.append(time.perf_counter_ns() - t0)
        out.append(tok)
    first = (state.prefill_ns + state.step_ns[0]) * 1e-9
    thr = n_tokens / (sum(state.step_ns) * 1e-9)
    res = BenchResult(config_id, model.kinds, model.spec.d_model, context, first, thr, state.peak_cache_bytes)
    return out, res


# ---------------------------------------------------------------------------
# efficiency sweep


def context_length(ctx, tile_size: int = 336, patch: int = 14) -> int:
    """Integer token counts pass through; ``"img:<res>"`` means a square image's visual tokens."""
    if isinstance(ctx, str):
        if not ctx.startswith("img:"):
            raise ConfigError(f"context {ctx!r} is neither an integer nor img:<resolution>")
        res = int(ctx[4:])
        return count_visual_tokens(res, res, tile_size, patch, include_global=True)
    n = int(ctx)
    if n < 1:
        raise ConfigError(f"context length must be positive, got {n}")
    return n


@dataclass
class ScalingFit:
    a: float  # quadratic
    b: float  # linear
    c: float  # constant
    quadratic_share: float  # a*L^2 / fitted total at the largest L
    exponent: float  # log-log slope over the measured range

    def summary(self) -> str:
        return (f"t ~ {self.a:.3e} L^2 + {self.b:.3e} L + {self.c:.3e}; "
                f"quadratic share {self.quadratic_share:.1%}; exponent {self.exponent:.2f}")


def fit_scaling(lengths: Sequence[float], times: Sequence[float]) -> ScalingFit:
    """Least-squares t = a L^2 + b L + c on relative residuals.

    Timings span orders of magnitude, so each row is scaled by 1/t; plain
    residuals would let the largest context decide every coefficient.
    """
    L = np.asarray(lengths, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if len(L) < 3:
        raise ValueError("need at least three points to fit a quadratic")
    if np.any(t <= 0):
        raise ValueError("timings must be positive")
    design = np.stack([L * L, L, np.ones_like(L)], axis=1) / t[:, None]
    (a, b, c), *_ = np.linalg.lstsq(design, np.ones_like(t), rcond=None)
    Lmax = L.max()
    total = a * Lmax**2 + b * Lmax + c
    share = float(a * Lmax**2 / total) if total > 0 else float("nan")
    pos = t > 0
    slope = float(np.polyfit(np.log(L[pos]), np.log(t[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return ScalingFit(float(a), float(b), float(c), share, slope)


@dataclass
class SweepResult:
    rows: list[BenchResult]  # every repeat plus one "median" row per cell

    def medians(self) -> list[BenchResult]:
        return [r for r in self.rows if r.repeat == "median"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def fits(self) -> dict[str, ScalingFit]:
        out = {}
        by_cfg: dict[str, list[BenchResult]] = {}
        for r in self.medians():
            by_cfg.setdefault(r.config, []).append(r)
        for name, rs in by_cfg.items():
            if len(rs) >= 3:
                out[name] = fit_scaling([r.context_tokens for r in rs], [r.first_token_latency_s for r in rs])
        return out

    def step_time(self, config: str, context: int) -> float:
        for r in self.medians():
            if r.config == config and r.context_tokens == context:
                return 1.0 / r.throughput_tok_per_s
        raise KeyError((config, context))


def _median_row(runs: list[BenchResult]) -> BenchResult:
    r0 = runs[0]
    return BenchResult(
        r0.config, r0.pattern, r0.d_model, r0.context_tokens,
        statistics.median(r.first_token_latency_s for r in runs),
        statistics.median(r.throughput_tok_per_s for r in runs),
        max(r.cache_bytes for r in runs),
        repeat="median",
    )


def _prepare_cell(name: str, spec: StackSpec, ctx_len: int, seed: int):
    model = build_stack(spec, Rng(seed).child(f"bench/{name}"))
    filler = Rng(seed).child(f"context/{ctx_len}").normal(0.0, 1.0 / math.sqrt(spec.d_model), (ctx_len, spec.d_model))
    return model, filler


def _failed(name: str, spec: StackSpec, ctx_len: int, exc: Exception) -> BenchResult:
    return BenchResult(name, spec.pattern, spec.d_model, ctx_len, float("nan"), float("nan"), 0,
                       failed=True, error=f"out of memory: {exc}")


def efficiency_sweep(configs: Sequence[dict], contexts: Sequence, n_tokens: int = 128, repeats: int = 5,
                     warmup: int = 1, model: dict | None = None, seed: int = 0, chunk: int = 512, jobs: int = 1,
                     tile_size: int = 336, patch: int = 14,
                     progress: Callable[[BenchResult], None] | None = None) -> SweepResult:
    """Time every (config, context) cell on a seeded model.

    Contexts are filler embeddings of the requested length (``img:<res>``
    resolves through the visual token count). BLAS is pinned to one thread.
    Repeats run round-robin over the cells, so slow phases of a shared
    machine land on every context instead of skewing one of them.
    """
    from threadpoolctl import threadpool_limits

    if not configs:
        raise ConfigError("sweep needs at least one model config")
    lengths = [context_length(c, tile_size, patch) for c in contexts]
    if len(lengths) < 2:
        raise ConfigError("sweep needs at least two context lengths")
    if repeats < 1:
        raise ConfigError("sweep needs at least one timed repeat")
    base = dict(model or {})
    cells = []
    for cfg in configs:
        cfg = dict(cfg)
        name = str(cfg.pop("name", cfg.get("pattern", "")))
        fields = dict(base, **cfg)
        moe = fields.pop("moe_positions", None)
        spec = StackSpec(moe_positions=None if moe is None else frozenset(moe), **fields)
        for L in lengths:
            cells.append((name, spec, L))

    runs: list[list[BenchResult]] = [[] for _ in cells]
    failed: dict[int, BenchResult] = {}
    prepared: dict[int, tuple] = {}

    def time_once(i: int, record: bool) -> None:
        name, spec, L = cells[i]
        try:
            if i not in prepared:
                prepared[i] = _prepare_cell(name, spec, L, seed)
            m, filler = prepared[i]
            _, res = generate(m, embeds=filler, n_tokens=n_tokens, chunk=chunk, config_id=name)
        except MemoryError as exc:
            prepared.pop(i, None)
            failed[i] = _failed(name, spec, L, exc)
            return
        if record:
            res.repeat = len(runs[i])
            runs[i].append(res)

    def live() -> list[int]:
        return [i for i in range(len(cells)) if i not in failed]

    with threadpool_limits(limits=1):
        pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
        try:
            for phase in [False] * warmup + [True] * repeats:
                if pool is not None:
                    list(pool.map(lambda i: time_once(i, phase), live()))
                else:
                    for i in live():
                        time_once(i, phase)
        finally:
            if pool is not None:
                pool.shutdown()

    rows: list[BenchResult] = []
    for i in range(len(cells)):
        if i in failed:
            rows.append(failed[i])
        else:
            rows += runs[i] + [_median_row(runs[i])]
        if progress is not None:
            progress(rows[-1])
    return SweepResult(rows)


def full_logits(model: HybridModel, prompt, visual_embeds=None) -> np.ndarray:
    """Uncached forward over the whole sequence: (L, vocab)."""
    with no_grad():
        return model(np.asarray(prompt, dtype=np.int64), visual_embeds).data


__all__ = [
    "BenchResult", "CSV_COLUMNS", "GenerationState", "ScalingFit", "SweepResult", "context_length",
    "decode_step", "efficiency_sweep", "fit_scaling", "full_logits", "generate", "prefill", "sample_token",
]
