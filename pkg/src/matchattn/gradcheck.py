"""Central finite differences and comparison against recorded backward."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tape, Var, no_record


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_k) - f(x - h e_k)) / 2h`` for every element ``k`` of ``x``.

    ``x`` is copied to float64 and perturbed in place one element at a time.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite at element {k}")
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradReport:
    name: str
    n: int
    max_rel: float
    frac_below: float

    def ok(self, rel_tol: float = 1e-4, worst_tol: float = 1e-3, quantile: float = 0.99) -> bool:
        return self.frac_below >= quantile and self.max_rel < worst_tol


def check_gradients(
    loss_fn: Callable[[], Var],
    variables: Sequence[Var],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradReport]:
    """Compare tape gradients of ``loss_fn()`` against finite differences.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of the
    given variables. With ``max_entries`` only a random subset of elements
    of each variable is probed.
    """
    for v in variables:
        v.data = np.ascontiguousarray(v.data)
        v.requires_grad = True
        v.tracked = True
        v.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros(v.shape) if v.grad is None else v.grad.astype(np.float64) for v in variables]

    reports = []
    for v, ga in zip(variables, analytic):
        flat = v.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            with no_record():
                fp = float(loss_fn().data)
            flat[k] = orig - h
            with no_record():
                fm = float(loss_fn().data)
            flat[k] = orig
            num[n] = (fp - fm) / (2 * h)
        rel = relative_error(ga.reshape(-1)[idx], num, floor)
        reports.append(GradReport(v.name or "?", idx.size, float(rel.max(initial=0.0)), float((rel < rel_tol).mean()) if rel.size else 1.0))
    return reports
