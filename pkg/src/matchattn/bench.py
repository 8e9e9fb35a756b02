"""Latency scaling of windowed matching attention against dense global
attention and against sampling keys/values bilinearly at every window
position."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import window_attention
from .autograd import no_record
from .bilinear_softmax import bilinear_softmax_forward
from .attention import window_index

BENCH_HEADER = ("variant", "tokens", "channels", "window", "runs", "median_ms")
GLOBAL_CAP = 128 * 128


@dataclass(frozen=True)
class BenchRow:
    variant: str
    tokens: int
    channels: int
    window: int
    runs: int
    median_ms: float

    @property
    def memory_estimate(self) -> int:
        """Attention values alive at once (analytic)."""
        if self.variant == "global":
            return self.tokens * min(self.tokens, 1024)
        return self.tokens * (self.window + 1) ** 2


def _median_ms(fn, runs: int) -> float:
    fn()  # warm caches and allocator
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def _inputs(rng, side: int, c: int, dtype=np.float32):
    shape = (1, side, side, 1, c)
    Q, K, V = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    R = rng.uniform(-3, 3, size=(1, side, side, 2)).astype(dtype)
    return Q, K, V, R


def run_match(Q, K, V, R, w: int):
    with no_record():
        return window_attention(Q, K, V, R, w, "dot")[0].data


def run_global(Q, K, V, chunk: int = 1024):
    """Dense softmax attention over all token pairs, chunked over queries."""
    q = Q.reshape(-1, Q.shape[-1])
    k = K.reshape(-1, K.shape[-1])
    v = V.reshape(-1, V.shape[-1])
    n = q.shape[0]
    if n > GLOBAL_CAP:
        raise ValueError(f"global attention capped at {GLOBAL_CAP} tokens, asked for {n}")
    gamma = 1.0 / math.sqrt(q.shape[-1])
    out = np.empty((n, v.shape[-1]), dtype=v.dtype)
    for s in range(0, n, chunk):
        logits = gamma * (q[s : s + chunk] @ k.T)
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True)
        out[s : s + chunk] = logits @ v
    return out


def _match_sim_agg(Q, K, V, R, w):
    """Similarity and aggregation stages of windowed attention on pre-sampled
    geometry: gather the expanded window once, then one fused softmax."""
    _, H, W, _, c = Q.shape
    centers = np.indices((H, W))[::-1].transpose(1, 2, 0) + R[0]
    win = window_index(H, W, centers, w)
    kf, vf, q = K.reshape(-1, c), V.reshape(-1, c), Q.reshape(H, W, c)
    gamma = 1.0 / math.sqrt(c)

    def run():
        kw = kf[win.pixel]
        sim = gamma * (kw @ q[..., None])[..., 0]
        a = bilinear_softmax_forward(sim, win.frac.astype(sim.dtype), w).weights
        return (a[..., None, :] @ vf[win.pixel])[..., 0, :]

    return run


def _direct_sim_agg(Q, K, V, R, w):
    """Alternative: bilinearly sample a key and a value at each of the w*w
    continuous window positions (four taps each), then a plain softmax."""
    _, H, W, _, c = Q.shape
    centers = np.indices((H, W))[::-1].transpose(1, 2, 0) + R[0]
    off = np.arange(-(w // 2), w // 2 + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    px = centers[..., 0, None] + ox.ravel()
    py = centers[..., 1, None] + oy.ravel()
    px, py = np.clip(px, 0, W - 1), np.clip(py, 0, H - 1)
    x0 = np.minimum(np.floor(px), W - 2).astype(np.int64)
    y0 = np.minimum(np.floor(py), H - 2).astype(np.int64)
    fx, fy = (px - x0)[..., None].astype(Q.dtype), (py - y0)[..., None].astype(Q.dtype)
    taps = [(y0 * W + x0, (1 - fx) * (1 - fy)), (y0 * W + x0 + 1, fx * (1 - fy)),
            (y0 * W + W + x0, (1 - fx) * fy), (y0 * W + W + x0 + 1, fx * fy)]
    kf, vf, q = K.reshape(-1, c), V.reshape(-1, c), Q.reshape(H, W, c)
    gamma = 1.0 / math.sqrt(c)

    def run():
        kw = sum(kf[i] * b for i, b in taps)
        vw = sum(vf[i] * b for i, b in taps)
        sim = gamma * (kw @ q[..., None])[..., 0]
        sim -= sim.max(-1, keepdims=True)
        e = np.exp(sim)
        a = e / e.sum(-1, keepdims=True)
        return (a[..., None, :] @ vw)[..., 0, :]

    return run


def bench_attention(sizes, variant: str = "match", channels: int = 8, window: int = 3, runs: int = 5,
                    seed: int = 0) -> list[BenchRow]:
    """Median latency per square token extent in ``sizes`` (ascending)."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng(seed)
    rows = []
    for side in sizes:
        Q, K, V, R = _inputs(rng, side, channels)
        if variant == "match":
            fn = lambda: run_match(Q, K, V, R, window)
        elif variant == "global":
            if side * side > GLOBAL_CAP:
                raise ValueError(f"global attention capped at {GLOBAL_CAP} tokens")
            fn = lambda: run_global(Q, K, V)
        elif variant == "direct":
            fn = _direct_sim_agg(Q, K, V, R, window)
        elif variant == "match_sim_agg":
            fn = _match_sim_agg(Q, K, V, R, window)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        rows.append(BenchRow(variant, side * side, channels, window, runs, _median_ms(fn, runs)))
    return rows


def loglog_slope(rows: list[BenchRow]) -> float:
    x = np.log([r.tokens for r in rows])
    y = np.log([r.median_ms for r in rows])
    return float(np.polyfit(x, y, 1)[0])


def sampling_ratio(side: int = 128, channels: int = 8, window: int = 3, runs: int = 5, seed: int = 0) -> float:
    """Direct-sampling time over fused-window time for similarity plus aggregation."""
    direct = bench_attention([side], "direct", channels, window, runs, seed)[0].median_ms
    match = bench_attention([side], "match_sim_agg", channels, window, runs, seed)[0].median_ms
    return direct / match


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r.variant, r.tokens, r.channels, r.window, r.runs, f"{r.median_ms:.4f}"])
    return buf.getvalue()
