"""Deterministic oracle/invariant checks behind the ``selfcheck`` command.

Every check returns a measured value and a tolerance; nothing here reads a
clock, so two runs with the same seed produce identical reports.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import mpmath
import numpy as np

from . import ssm
from .layers import AttentionLayer, FeedForward, MoE, StackSpec, build_stack
from .numerics import Rng, Tensor, grad_check, no_grad
from .numerics import functional as F
from .vision import count_visual_tokens, frame_indices, match_aspect_ratio


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def row(self) -> list[str]:
        return [self.name, repr(float(self.value)), repr(float(self.tolerance)), "pass" if self.passed else "FAIL"]


def _below(name: str, value: float, tol: float) -> CheckResult:
    return CheckResult(name, value, tol, bool(value < tol))


def _equal(name: str, got, want) -> CheckResult:
    ok = got == want
    return CheckResult(name, 0.0 if ok else 1.0, 0.0, ok)


# ---------------------------------------------------------------------------
# reusable oracles


def random_system(rng: Rng, n: int) -> ssm.SSMParams:
    return ssm.SSMParams(
        A=-rng.uniform(0.05, 2.0, n), B=rng.normal(size=n), C=rng.normal(size=n),
        delta=float(np.exp(rng.uniform(np.log(1e-3), np.log(1.0)))),
    )


def scan_equivalence_error(rng: Rng, n_systems: int, max_n: int = 8, max_len: int = 64) -> float:
    worst = 0.0
    with no_grad():
        for _ in range(n_systems):
            n = int(rng.integers(1, max_n + 1))
            L = int(rng.integers(1, max_len + 1))
            p = random_system(rng, n)
            d = ssm.discretize(p)
            x = rng.normal(size=L)
            y_rec = ssm.scan_recurrent(d, p.C, x).data
            y_conv = ssm.scan_convolutional(x, ssm.kernel(d, p.C, L)).data
            worst = max(worst, float(np.max(np.abs(y_rec - y_conv))))
    return worst


def zoh_oracle(a: float, b: float, delta: float, dps: int = 50) -> tuple[float, float]:
    """High-precision scalar (A_bar, B_bar); the A -> 0 cell uses delta * B."""
    with mpmath.workdps(dps):
        A, B, D = mpmath.mpf(a), mpmath.mpf(b), mpmath.mpf(delta)
        a_bar = mpmath.exp(D * A)
        b_bar = D * B if A == 0 else mpmath.expm1(D * A) / A * B
        return float(a_bar), float(b_bar)


def discretization_triples(rng: Rng, count: int) -> np.ndarray:
    """(A, B, delta) rows; a fifth of the A values sit at or near zero."""
    A = -np.exp(rng.uniform(np.log(1e-3), np.log(10.0), count))
    near = rng.uniform(0, 1, count) < 0.2
    A[near] = -np.exp(rng.uniform(np.log(1e-14), np.log(1e-6), int(near.sum())))
    A[: max(1, count // 100)] = 0.0
    B = rng.normal(size=count)
    delta = np.exp(rng.uniform(np.log(1e-4), np.log(1.0), count))
    return np.stack([A, B, delta], axis=1)


def discretization_error(rng: Rng, count: int) -> float:
    rows = discretization_triples(rng, count)
    with no_grad():
        d = ssm.discretize(ssm.SSMParams(rows[:, 0], rows[:, 1], np.zeros(count), rows[:, 2]))
    worst = 0.0
    for i, (a, b, dt) in enumerate(rows):
        want_a, want_b = zoh_oracle(a, b, dt)
        for got, want in ((d.A_bar.data[i], want_a), (d.B_bar.data[i], want_b)):
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    return worst


def causality_violation(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, axis: int = 0) -> float:
    """Largest change in outputs before position t when the input at t is perturbed."""
    base = fn(x)
    worst = 0.0
    for t in range(x.shape[axis]):
        xp = x.copy()
        idx = [slice(None)] * x.ndim
        idx[axis] = t
        xp[tuple(idx)] += 1.0
        out = fn(xp)
        before = [slice(None)] * base.ndim
        before[axis] = slice(0, t)
        worst = max(worst, float(np.max(np.abs(out[tuple(before)] - base[tuple(before)]), initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# the suite


def run_checks(seed: int = 0) -> list[CheckResult]:
    root = Rng(seed)
    out = [
        _below("ssm.recurrent_vs_convolutional", scan_equivalence_error(root.child("equiv"), 50), 1e-9),
        _below("ssm.discretization_vs_oracle", discretization_error(root.child("zoh"), 200), 1e-12),
        _equal("vision.tokens_672_train", count_visual_tokens(672, 672, include_global=False), 2304),
        _equal("vision.tokens_672_infer", count_visual_tokens(672, 672), 2880),
        _equal("vision.tokens_1344", count_visual_tokens(1344, 1344), 9792),
        _equal("vision.tokens_2688", count_visual_tokens(2688, 2688), 37440),
        _equal("vision.aspect_1000x400", match_aspect_ratio(1000, 400), (2, 1)),
        _equal("vision.frames_64_8", frame_indices(64, 8), [0, 9, 18, 27, 36, 45, 54, 63]),
    ]

    g = root.child("grad")
    B, L, D, N = 1, 6, 3, 2
    scan_args = [
        Tensor(g.normal(size=(B, L, D))),
        Tensor(F.softplus(Tensor(g.normal(size=(B, L, D)))).data),
        Tensor(-np.exp(g.normal(size=(D, N)))),
        Tensor(g.normal(size=(B, L, N))),
        Tensor(g.normal(size=(B, L, N))),
    ]
    rep = grad_check(lambda a: F.sum(F.selective_scan(*a) ** 2), scan_args)
    out.append(_below("grad.selective_scan", rep.max_rel_err, 1e-4))

    layer = AttentionLayer(8, 2, FeedForward(8, 16, g.child("ffn")), g.child("attn"))
    xa = Tensor(g.normal(size=(1, 5, 8)))
    rep = grad_check(lambda ps: F.sum(layer(xa) ** 2), layer.parameters(), max_entries=12, rng=g.child("pick"))
    out.append(_below("grad.attention_layer", rep.max_rel_err, 1e-4))

    moe = MoE(8, 16, 4, 2, g.child("moe"))
    xm = Tensor(g.normal(size=(5, 8)))
    rep = grad_check(lambda ps: F.sum(moe(xm) ** 2), moe.parameters(), max_entries=12, rng=g.child("pick2"))
    out.append(_below("grad.moe", rep.max_rel_err, 1e-4))

    model = build_stack(StackSpec(pattern="AMMM", d_model=16, n_heads=2, n_experts=2, top_k=1, vocab=16),
                        root.child("model"))
    emb = root.child("emb").normal(size=(1, 12, 16))

    def hidden(x):
        with no_grad():
            h = Tensor(x)
            for layer_ in model.layers:
                h = layer_(h)
            return h.data

    out.append(_below("causality.ammm_stack", causality_violation(hidden, emb, axis=1), 1e-12))

    from .inference import decode_step, full_logits, prefill

    prompt = root.child("prompt").integers(0, 16, 7)
    state, logits = prefill(model, prompt)
    worst = float(np.max(np.abs(logits - full_logits(model, prompt)[-1])))
    seq = list(prompt)
    for _ in range(4):
        tok = int(np.argmax(logits))
        seq.append(tok)
        logits = decode_step(model, state, tok)
        worst = max(worst, float(np.max(np.abs(logits - full_logits(model, seq)[-1]))))
    out.append(_below("inference.cache_equivalence", worst, 1e-9))
    return out


def report_csv(results: list[CheckResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "tolerance", "status"])
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
