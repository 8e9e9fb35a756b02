"""Matching attention: sliding-window attention centred at query position plus
relative position.

Shapes: per-view features are ``[B, H, W, C]``. Cross-view relative
positions are ``[B, H, W, 2]`` and shared by all heads; self relative
positions are per head, ``[B, H, W, h, 2]``, stored flattened head-major as
``2h`` channels ``(x_0, y_0, x_1, y_1, ...)`` when concatenated to features.

Border handling: window indices are clamped to the image, so clamped
entries are genuine (replicated) border keys. Only entries that belong to
no sub-window with at least one in-image position are masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import NonFiniteError, Var, as_var, get_dtype
from .bilinear_softmax import CORNERS, bilinear_softmax_backward, bilinear_softmax_forward, mask_value
from .ops import _emit

SIMILARITIES = ("dot", "neg_l1")


@dataclass(frozen=True)
class AttnConfig:
    """Static shape and behaviour of one matching-attention layer.

    ``c_k`` and ``c_v`` are per-head widths. ``kind`` is ``"cross"`` (shared
    relative position, two position-delta outputs) or ``"self"`` (per-head
    sampling positions; outputs a 2-channel delta for the cross-view
    position and ``2h`` channels for the per-head positions).
    """

    w: int
    heads: int
    c_k: int
    c_v: int
    similarity: str = "neg_l1"
    kind: str = "cross"
    inject_weights: bool = False
    gated: bool = False

    def __post_init__(self):
        if self.w < 1 or self.w % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {self.w}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.kind not in ("cross", "self"):
            raise ValueError("kind must be 'cross' or 'self'")

    @property
    def gamma(self) -> float:
        return 1.0 / math.sqrt(self.c_k)

    @property
    def entries(self) -> int:
        return (self.w + 1) ** 2

    @property
    def pos_out(self) -> int:
        return 2 if self.kind == "cross" else 2 + 2 * self.heads


@dataclass
class LayerWeights:
    W_q: Var
    W_k: Var
    W_v: Var
    W_p: Var
    beta: Var
    W_g: Var | None = None

    def named(self, prefix: str = "") -> dict[str, Var]:
        out = {f"{prefix}W_q": self.W_q, f"{prefix}W_k": self.W_k, f"{prefix}W_v": self.W_v,
               f"{prefix}W_p": self.W_p, f"{prefix}beta": self.beta}
        if self.W_g is not None:
            out[f"{prefix}W_g"] = self.W_g
        return out


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int | None = None) -> np.ndarray:
    fan_in = fan_in or shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


def init_layer_weights(cfg: AttnConfig, c_in_hat: int, c_out: int, rng: np.random.Generator) -> LayerWeights:
    """Fan-in uniform weights; ``beta`` starts at (0.1, 0.1).

    ``c_in_hat`` counts every input channel including the concatenated
    relative positions. The projection width grows by ``h * (w+1)^2`` when
    attention weights are injected.
    """
    h = cfg.heads
    p_in = h * cfg.c_v + (h * cfg.entries if cfg.inject_weights else 0)
    return LayerWeights(
        W_q=Var(fan_in_uniform(rng, (c_in_hat, h * cfg.c_k)), True),
        W_k=Var(fan_in_uniform(rng, (c_in_hat, h * cfg.c_k)), True),
        W_v=Var(fan_in_uniform(rng, (c_in_hat, h * cfg.c_v)), True),
        W_p=Var(fan_in_uniform(rng, (p_in, c_out + cfg.pos_out)), True),
        beta=Var(np.full(2, 0.1, dtype=get_dtype()), True),
        W_g=Var(fan_in_uniform(rng, (c_in_hat, h * cfg.c_v)), True) if cfg.gated else None,
    )


def concat_rpos(F, R, beta, extra=()) -> Var:
    """``F || beta * R || extra...`` along channels."""
    F, R = as_var(F), as_var(R)
    if F.shape[:-1] != R.shape[:-1]:
        raise ValueError(f"concat_rpos: feature shape {F.shape} and position shape {R.shape} differ")
    return ops.concat([F, ops.mul(R, beta), *extra], axis=-1)


# ---------------------------------------------------------------- windowing


@dataclass
class WindowIndex:
    """Expanded-window geometry for a batch of continuous centres."""

    pixel: np.ndarray  # [..., (w+1)^2] flat in-image pixel index (y * W + x)
    clamped: np.ndarray  # [..., (w+1)^2] True where the index was clamped
    masked: np.ndarray  # [..., (w+1)^2] True where no valid sub-window covers it
    frac: np.ndarray  # [..., 2]
    base: np.ndarray  # [..., 2] integer floor of the centre
    valid_sub: np.ndarray = field(repr=False, default=None)  # [..., 4]


def window_index(H: int, W: int, centers: np.ndarray, w: int) -> WindowIndex:
    centers = np.asarray(centers)
    base = np.floor(centers)
    frac = centers - base
    base = base.astype(np.int64)
    off = np.arange(-(w // 2), w // 2 + 2)
    xs = base[..., 0, None] + off
    ys = base[..., 1, None] + off
    in_x = (xs >= 0) & (xs <= W - 1)
    in_y = (ys >= 0) & (ys <= H - 1)
    cx = np.clip(xs, 0, W - 1)
    cy = np.clip(ys, 0, H - 1)
    n = w + 1
    lead = centers.shape[:-1]
    pixel = (cy[..., :, None] * W + cx[..., None, :]).reshape(lead + (n * n,))
    clamped = (~in_y[..., :, None] | ~in_x[..., None, :]).reshape(lead + (n * n,))
    valid = np.stack(
        [in_x[..., dx : dx + w].any(-1) & in_y[..., dy : dy + w].any(-1) for dy, dx in CORNERS.values()],
        axis=-1,
    )
    covered = np.zeros(lead + (n, n), dtype=bool)
    for t, (dy, dx) in enumerate(CORNERS.values()):
        covered[..., dy : dy + w, dx : dx + w] |= valid[..., t, None, None]
    # nothing in view at all: keep the replicated border keys
    covered |= ~valid.any(-1)[..., None, None]
    return WindowIndex(pixel, clamped, ~covered.reshape(lead + (n * n,)), frac, base, valid)


def gather_window(K, center, w: int):
    """Gather the expanded window of ``K[H, W, c]`` around one continuous centre.

    Returns ``(window [(w+1)^2, c], clamped mask [(w+1)^2], frac (fx, fy))``.
    """
    K = np.asarray(as_var(K).data)
    H, W, _ = K.shape
    idx = window_index(H, W, np.asarray(center, dtype=np.float64), w)
    return K.reshape(H * W, -1)[idx.pixel], idx.clamped, tuple(idx.frac)


def similarity(q, Kwin, kind: str, gamma: float) -> np.ndarray:
    """Similarity of one or many queries ``[..., c]`` to windows ``[..., E, c]``."""
    q = np.asarray(q)
    Kwin = np.asarray(Kwin)
    if q.shape[-1] != Kwin.shape[-1]:
        raise ValueError("similarity: channel extents differ")
    if kind == "dot":
        return gamma * (Kwin @ q[..., :, None])[..., 0]
    if kind == "neg_l1":
        return -gamma * np.abs(q[..., None, :] - Kwin).sum(-1)
    raise ValueError(f"unknown similarity {kind!r}")


def _first_bad(arr: np.ndarray, lead_ndim: int):
    bad = ~np.isfinite(arr)
    bad = bad.reshape(arr.shape[:lead_ndim] + (-1,)).any(-1)
    return tuple(int(i) for i in np.argwhere(bad)[0])


def window_attention(Q, K, V, R, w: int, kind: str = "neg_l1", gamma: float | None = None):
    """Core windowed attention over all queries and heads.

    ``Q, K: [B, H, W, h, c_k]``, ``V: [B, H, W, h, c_v]``; ``R`` is either
    ``[B, H, W, 2]`` (shared by heads) or ``[B, H, W, h, 2]``. Queries of
    batch ``b`` attend to keys of batch ``b``. Returns ``(m, alpha)`` with
    ``m: [B, H, W, h, c_v]`` and ``alpha: [B, H, W, h, (w+1)^2]``; the
    gradient reaches ``R`` through the bilinear weights.
    """
    Q, K, V, R = as_var(Q), as_var(K), as_var(V), as_var(R)
    B, H, W, h, ck = Q.shape
    cv = V.shape[-1]
    gamma = 1.0 / math.sqrt(ck) if gamma is None else gamma
    shared = R.ndim == 4
    Rh = R.data[..., None, :] if shared else R.data
    grid = ops.identity_grid(H, W, dtype=R.data.dtype)
    centers = np.broadcast_to(grid[None, :, :, None, :] + Rh, (B, H, W, h, 2))
    win = window_index(H, W, centers, w)
    E = (w + 1) ** 2
    bidx = np.arange(B).reshape(B, 1, 1, 1, 1) * (H * W)
    head = np.arange(h).reshape(1, 1, 1, h, 1)
    flat = (bidx + win.pixel) * h + head  # rows of K.reshape(B*H*W*h, c)
    Kwin = K.data.reshape(-1, ck)[flat]
    Vwin = V.data.reshape(-1, cv)[flat]
    q = Q.data
    if kind == "dot":
        sim = gamma * (Kwin @ q[..., :, None])[..., 0]
        diff = None
    else:
        diff = q[..., None, :] - Kwin
        sim = -gamma * np.abs(diff).sum(-1)
    if not np.isfinite(sim).all():
        raise NonFiniteError(f"non-finite similarity at query {_first_bad(sim, 4)}")
    sim = np.where(win.masked, mask_value(sim.dtype), sim)
    attn = bilinear_softmax_forward(sim, win.frac.astype(sim.dtype), w)
    alpha = attn.weights
    m = (alpha[..., None, :] @ Vwin)[..., 0, :]
    if not np.isfinite(m).all():
        raise NonFiniteError(f"non-finite aggregation at query {_first_bad(m, 4)}")

    def backward(gs):
        gm, galpha = gs
        dalpha = np.zeros_like(alpha) if galpha is None else galpha.copy()
        if gm is not None:
            dalpha += (Vwin @ gm[..., :, None])[..., 0]
        dsim, dfrac = bilinear_softmax_backward(attn, dalpha)
        gQ = gK = gV = gR = None
        if Q.tracked or K.tracked:
            if kind == "dot":
                gQ = gamma * (dsim[..., None, :] @ Kwin)[..., 0, :]
                dKwin = gamma * dsim[..., None] * q[..., None, :]
            else:
                sgn = np.sign(diff)
                gQ = -gamma * (dsim[..., None, :] @ sgn)[..., 0, :]
                dKwin = gamma * dsim[..., None] * sgn
            if K.tracked:
                gK = _scatter_rows(flat, dKwin, K.data.size // ck, ck).reshape(K.shape).astype(K.data.dtype)
        if V.tracked and gm is not None:
            dVwin = alpha[..., None] * gm[..., None, :]
            gV = _scatter_rows(flat, dVwin, V.data.size // cv, cv).reshape(V.shape).astype(V.data.dtype)
        if R.tracked:
            gR = dfrac.sum(axis=3) if shared else dfrac
        return gQ, gK, gV, gR

    m_var, alpha_var = _emit("window_attention", (Q, K, V, R), (m, alpha), backward)
    return m_var, alpha_var, win


def _scatter_rows(rows: np.ndarray, values: np.ndarray, n_rows: int, c: int) -> np.ndarray:
    """Sum ``values[..., c]`` into ``n_rows`` rows addressed by ``rows``."""
    full = (rows[..., None] * c + np.arange(c)).ravel()
    return np.bincount(full, weights=values.ravel(), minlength=n_rows * c).reshape(n_rows, c)


# ------------------------------------------------------------------- layers


@dataclass
class AttnResult:
    F: Var  # [B, H, W, c_out] feature update (residual added by caller)
    R_delta: Var  # [B, H, W, 2]
    sR_delta: Var | None  # [B, H, W, h, 2] for self layers
    alpha: Var  # [B, H, W, h, (w+1)^2]
    window: WindowIndex


def match_attention(Fq_hat, Fkv_hat, R, cfg: AttnConfig, weights: LayerWeights) -> AttnResult:
    """One matching-attention layer.

    ``Fq_hat`` supplies queries (and the gate), ``Fkv_hat`` keys and values;
    both already carry the concatenated relative positions. ``R`` is the
    sampling position: shared ``[B, H, W, 2]`` for cross layers, per head
    ``[B, H, W, h, 2]`` for self layers. Residuals are left to the caller.
    """
    Fq_hat, Fkv_hat = as_var(Fq_hat), as_var(Fkv_hat)
    B, H, W, _ = Fq_hat.shape
    h = cfg.heads
    Q = ops.reshape(ops.linear(Fq_hat, weights.W_q), (B, H, W, h, cfg.c_k))
    K = ops.reshape(ops.linear(Fkv_hat, weights.W_k), (B, H, W, h, cfg.c_k))
    V = ops.reshape(ops.linear(Fkv_hat, weights.W_v), (B, H, W, h, cfg.c_v))
    m, alpha, win = window_attention(Q, K, V, R, cfg.w, cfg.similarity, cfg.gamma)
    m = ops.reshape(m, (B, H, W, h * cfg.c_v))
    if cfg.gated:
        if weights.W_g is None:
            raise ValueError("gated layer without W_g")
        m = ops.mul(m, ops.silu(ops.linear(Fq_hat, weights.W_g)))
    if cfg.inject_weights:
        m = ops.concat([m, ops.reshape(alpha, (B, H, W, h * cfg.entries))])
    out = ops.linear(m, weights.W_p)
    c_out = out.shape[-1] - cfg.pos_out
    if cfg.kind == "cross":
        F, dR = ops.split(out, [c_out, 2])
        dsR = None
    else:
        F, dR, dsR = ops.split(out, [c_out, 2, 2 * h])
        dsR = ops.reshape(dsR, (B, H, W, h, 2))
    return AttnResult(F, dR, dsR, alpha, win)


@dataclass
class ConvGLUWeights:
    W_a: Var  # [c, r*c] value branch
    W_b: Var  # [c, r*c] gate branch
    dw: Var  # [3, 3, 1, r*c] depthwise kernel
    W_out: Var  # [r*c, c]

    def named(self, prefix: str = "") -> dict[str, Var]:
        return {f"{prefix}W_a": self.W_a, f"{prefix}W_b": self.W_b, f"{prefix}dw": self.dw, f"{prefix}W_out": self.W_out}


def init_convglu(c: int, rng: np.random.Generator, ratio: int = 2) -> ConvGLUWeights:
    hidden = ratio * c
    return ConvGLUWeights(
        W_a=Var(fan_in_uniform(rng, (c, hidden)), True),
        W_b=Var(fan_in_uniform(rng, (c, hidden)), True),
        dw=Var(fan_in_uniform(rng, (3, 3, 1, hidden), fan_in=9), True),
        W_out=Var(fan_in_uniform(rng, (hidden, c)), True),
    )


def convglu(x, weights: ConvGLUWeights) -> Var:
    """``W_out((W_a x) * SiLU(DWConv3x3(W_b x)))`` without biases."""
    x = as_var(x)
    a = ops.linear(x, weights.W_a)
    g = ops.linear(x, weights.W_b)
    g = ops.conv2d(g, weights.dw, padding=1, groups=g.shape[-1])
    return ops.linear(ops.mul(a, ops.silu(g)), weights.W_out)
