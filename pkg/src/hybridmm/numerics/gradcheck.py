from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import NumericError, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` against central differences.

    ``x`` is a tensor or a list of tensors (e.g. model parameters); ``f`` is
    called with ``x`` as given. With ``max_entries`` only that many
    coordinates per tensor are probed, chosen by ``rng``.

    Relative error per coordinate is |tape - fd| / max(|tape|, |fd|, s) with
    s = 1e-3 * (largest |fd| over every probed coordinate). Coordinates three
    orders of magnitude below the largest gradient are judged on the global
    scale. The default step sits near the cube root of machine epsilon, where
    truncation and rounding error in central differences balance.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f(x) is not finite")
    out.backward()
    rng = rng or Rng(0)

    tapes, fds = [], []
    for t in xs:
        tape = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(f(x).data)
                flat[i] = orig - step
                fm = float(f(x).data)
            flat[i] = orig
            fd[j] = (fp - fm) / (2 * step)
        if not np.isfinite(fd).all():
            raise NumericError("grad_check: non-finite finite difference")
        tapes.append(tape.reshape(-1)[idx])
        fds.append(fd)
    tp = np.concatenate(tapes) if tapes else np.zeros(0)
    fd = np.concatenate(fds) if fds else np.zeros(0)
    floor = max(1e-3 * float(np.max(np.abs(fd), initial=0.0)), 1e-300)
    abs_err = np.abs(tp - fd)
    rel = abs_err / np.maximum(np.maximum(np.abs(tp), np.abs(fd)), floor)
    return GradCheckReport(float(np.max(rel, initial=0.0)), float(np.max(abs_err, initial=0.0)), tp.size, tol)
