"""BilinearSoftmax: attention at a continuous window center.

The expanded window has ``(w+1)**2`` entries laid out row-major as a
``(w+1, w+1)`` block (rows are y, columns are x). Its four corner-anchored
``w x w`` sub-windows are

    nw: rows [0, w),   cols [0, w)
    ne: rows [0, w),   cols [1, w+1)
    sw: rows [1, w+1), cols [0, w)
    se: rows [1, w+1), cols [1, w+1)

A softmax is taken inside each sub-window, scaled by the bilinear weight of
its corner and the four results are summed back into the expanded layout.

Masked similarities carry the most negative finite value of their dtype.
A sub-window whose entries are all masked drops out and its bilinear weight
is redistributed proportionally over the surviving sub-windows.

All functions are vectorised over leading axes: ``sim`` is ``[..., (w+1)**2]``
and ``frac`` is ``[..., 2]`` holding ``(fx, fy)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Var, as_var
from .ops import _emit

__all__ = [
    "CORNERS",
    "FractionalOffset",
    "WindowAttn",
    "bilinear_softmax",
    "bilinear_softmax_backward",
    "bilinear_softmax_forward",
    "bilinear_softmax_reference",
    "bilinear_weights",
    "mask_value",
    "window_size",
]

# (row offset, col offset) of each sub-window inside the expanded window
CORNERS = {"nw": (0, 0), "ne": (0, 1), "sw": (1, 0), "se": (1, 1)}
_OFFSETS = tuple(CORNERS.values())


@dataclass(frozen=True)
class FractionalOffset:
    """Continuous center split as ``base + frac`` with ``base = floor(center)``."""

    base: tuple[int, int]
    frac: tuple[float, float]

    @classmethod
    def from_center(cls, x: float, y: float) -> "FractionalOffset":
        bx, by = np.floor(x), np.floor(y)
        return cls((int(bx), int(by)), (float(x - bx), float(y - by)))

    @property
    def center(self) -> tuple[float, float]:
        return (self.base[0] + self.frac[0], self.base[1] + self.frac[1])


@dataclass
class WindowAttn:
    """Attention weights over one or many expanded windows."""

    weights: np.ndarray
    frac: np.ndarray
    w: int
    cache: "_Cache | None" = None

    @property
    def grid(self) -> np.ndarray:
        """Weights reshaped to ``[..., w+1, w+1]``."""
        return self.weights.reshape(self.weights.shape[:-1] + (self.w + 1, self.w + 1))


def mask_value(dtype) -> float:
    """Sentinel similarity for masked entries."""
    return float(np.finfo(dtype).min)


def window_size(n_entries: int) -> int:
    n = int(round(np.sqrt(n_entries)))
    if n * n != n_entries or n < 2 or (n - 1) % 2 == 0:
        raise ValueError(f"{n_entries} entries is not an expanded window (w+1)^2 with odd w")
    return n - 1


def bilinear_weights(frac) -> np.ndarray:
    """Weights ``(b_nw, b_ne, b_sw, b_se)`` stacked on a trailing axis."""
    frac = np.asarray(frac)
    fx, fy = frac[..., 0], frac[..., 1]
    return np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)


def _bilinear_partials(frac: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fx, fy = frac[..., 0], frac[..., 1]
    dfx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=-1)
    dfy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=-1)
    return dfx, dfy


def _sub(S: np.ndarray, t: int, w: int) -> np.ndarray:
    dy, dx = _OFFSETS[t]
    return S[..., dy : dy + w, dx : dx + w]


class _Cache:
    __slots__ = ("w", "frac", "b", "bp", "valid", "renorm", "sb", "e", "Z", "coef", "C", "slow", "alphas")


def _effective_weights(S: np.ndarray, frac: np.ndarray, w: int, cache: _Cache) -> np.ndarray:
    """Bilinear weights after dropping all-masked sub-windows."""
    thr = 0.5 * mask_value(S.dtype)
    m = np.stack([_sub(S, t, w).max(axis=(-2, -1)) for t in range(4)], axis=-1)
    valid = m > thr
    b = bilinear_weights(frac).astype(S.dtype)
    vb = np.where(valid, b, 0.0)
    sb = vb.sum(axis=-1)
    # no surviving weight at all: fall back to the raw weights
    renorm = valid.any(axis=-1) & (sb > 0) & ~valid.all(axis=-1)
    safe = np.where(renorm, sb, 1.0)[..., None]
    bp = np.where(renorm[..., None], vb / safe, b)
    cache.b, cache.bp, cache.valid, cache.renorm, cache.sb = b, bp, valid, renorm, sb
    return bp


def _scatter(values: np.ndarray, w: int, lead: tuple[int, ...], dtype) -> np.ndarray:
    """Spread per-sub-window scalars ``[..., 4]`` over the expanded layout."""
    out = np.zeros(lead + (w + 1, w + 1), dtype=dtype)
    for t, (dy, dx) in enumerate(_OFFSETS):
        out[..., dy : dy + w, dx : dx + w] += values[..., t, None, None]
    return out


def _sub_softmax(block: np.ndarray) -> np.ndarray:
    flat = block.reshape(block.shape[:-2] + (-1,))
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(block.shape)


def _reference_rows(S: np.ndarray, bp: np.ndarray, w: int):
    """Four explicit sub-window softmaxes, scaled and gathered."""
    lead = S.shape[:-2]
    out = np.zeros_like(S)
    alphas = []
    for t, (dy, dx) in enumerate(_OFFSETS):
        a = _sub_softmax(_sub(S, t, w))
        alphas.append(a)
        out[..., dy : dy + w, dx : dx + w] += bp[..., t, None, None] * a
    return out.reshape(lead + (-1,)), alphas


def bilinear_softmax_reference(sim, frac, w: int | None = None) -> WindowAttn:
    """Unfused transcription: scatter into four sub-windows, softmax each,
    scale by the bilinear weights, gather back."""
    sim = np.asarray(sim)
    frac = np.asarray(frac, dtype=sim.dtype)
    w = window_size(sim.shape[-1]) if w is None else w
    S = sim.reshape(sim.shape[:-1] + (w + 1, w + 1))
    cache = _Cache()
    bp = _effective_weights(S, frac, w, cache)
    weights, _ = _reference_rows(S, bp, w)
    return WindowAttn(weights, frac, w)


def bilinear_softmax_forward(sim, frac, w: int | None = None) -> WindowAttn:
    """Single-exponential evaluation of BilinearSoftmax.

    One exponential per expanded-window entry, taken against the window's
    global maximum; each sub-window only contributes a normaliser ``Z_t``
    and the output is ``exp(s_j - M) * sum_{t containing j} b_t / Z_t``.
    Rows where a surviving sub-window underflows are recomputed with
    per-sub-window maxima.
    """
    sim = np.asarray(sim)
    frac = np.asarray(frac, dtype=sim.dtype)
    w = window_size(sim.shape[-1]) if w is None else w
    lead = sim.shape[:-1]
    S = sim.reshape(lead + (w + 1, w + 1))
    cache = _Cache()
    cache.w, cache.frac = w, frac
    bp = _effective_weights(S, frac, w, cache)

    M = S.max(axis=(-2, -1), keepdims=True)
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(S - M)
    Z = np.stack([_sub(e, t, w).sum(axis=(-2, -1)) for t in range(4)], axis=-1)
    tiny = np.finfo(S.dtype).tiny * 1e6
    slow = ((Z < tiny) & (bp != 0)).any(axis=-1)
    safeZ = np.where(Z > 0, Z, 1.0)
    # weights stay polynomial in frac, so slightly negative ones are kept
    coef = np.where(bp != 0, bp / safeZ, 0.0).astype(S.dtype)
    C = _scatter(coef, w, lead, S.dtype)
    out = (e * C).reshape(lead + (-1,))

    cache.e, cache.Z, cache.coef, cache.C, cache.slow = e, Z, coef, C, slow
    cache.alphas = None
    if slow.any():
        ref, alphas = _reference_rows(S[slow], bp[slow], w)
        out[slow] = ref
        cache.alphas = alphas
    return WindowAttn(out, frac, w, cache)


def _frac_grad(cache: _Cache, dbp: np.ndarray) -> np.ndarray:
    """Chain d/d(effective weights) through renormalisation and the bilinear
    weight partials to d/d(fx, fy)."""
    bp, valid, renorm, sb = cache.bp, cache.valid, cache.renorm, cache.sb
    inner = (bp * dbp).sum(axis=-1, keepdims=True)
    safe = np.where(renorm, sb, 1.0)[..., None]
    db = np.where(renorm[..., None], np.where(valid, (dbp - inner) / safe, 0.0), dbp)
    pfx, pfy = _bilinear_partials(cache.frac)
    return np.stack([(db * pfx).sum(-1), (db * pfy).sum(-1)], axis=-1)


def bilinear_softmax_backward(attn: WindowAttn, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dL/dsim, dL/dfrac)`` given ``dL/d(weights)``.

    ``dL/db_t`` is the sub-window sum of upstream times the sub-window
    softmax; the similarity gradient is the per-sub-window softmax Jacobian
    scaled by ``b_t``.
    """
    cache = attn.cache
    if cache is None:
        raise ValueError("backward needs the WindowAttn returned by bilinear_softmax_forward")
    w = cache.w
    g = np.asarray(upstream, dtype=attn.weights.dtype)
    lead = g.shape[:-1]
    G = g.reshape(lead + (w + 1, w + 1))
    e, Z, coef, C = cache.e, cache.Z, cache.coef, cache.C
    ge = G * e
    safeZ = np.where(Z > 0, Z, 1.0)
    s = np.stack([_sub(ge, t, w).sum(axis=(-2, -1)) for t in range(4)], axis=-1)
    s = np.where(Z > 0, s / safeZ, 0.0)
    dS = e * (G * C - _scatter(coef * s, w, lead, e.dtype))
    dbp = s
    if cache.slow.any():
        Gs = G[cache.slow]
        bps = cache.bp[cache.slow]
        ds = np.zeros_like(Gs)
        ss = []
        for t, (dy, dx) in enumerate(_OFFSETS):
            a = cache.alphas[t]
            gt = Gs[..., dy : dy + w, dx : dx + w]
            st = (gt * a).sum(axis=(-2, -1))
            ss.append(st)
            ds[..., dy : dy + w, dx : dx + w] += bps[..., t, None, None] * a * (gt - st[..., None, None])
        dS[cache.slow] = ds
        dbp = dbp.copy()
        dbp[cache.slow] = np.stack(ss, axis=-1)
    dfrac = _frac_grad(cache, dbp)
    return dS.reshape(lead + (-1,)), dfrac.astype(g.dtype)


def bilinear_softmax(sim, frac, w: int | None = None) -> Var:
    """Recording wrapper: gradients flow to both ``sim`` and ``frac``."""
    sim, frac = as_var(sim), as_var(frac)
    attn = bilinear_softmax_forward(sim.data, frac.data, w)

    def backward(gs):
        dsim, dfrac = bilinear_softmax_backward(attn, gs[0])
        return dsim, dfrac

    return _emit("bilinear_softmax", (sim, frac), attn.weights, backward)
