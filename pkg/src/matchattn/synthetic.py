"""Synthetic image pairs with exact ground truth and analytic occlusion.

Every scene carries relative positions for both views (reference view
first) and the non-occlusion masks implied by its geometry. Disparities and
vertical flow components are integers where a scene needs the
cross-view consistency to hold exactly under bilinear sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("constant_shift", "two_layer", "smooth_warp")


@dataclass
class SyntheticScene:
    kind: str
    I0: np.ndarray  # [H, W, 3] in [0, 1]
    I1: np.ndarray
    R0: np.ndarray  # [H, W, 2] reference-view relative positions
    R1: np.ndarray
    noc0: np.ndarray  # [H, W] bool
    noc1: np.ndarray
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def disparity(self) -> np.ndarray:
        return -self.R0[..., 0]


class Texture:
    """Continuous multi-octave value noise, evaluated by bilinear interpolation."""

    def __init__(self, rng: np.random.Generator, extent: tuple[float, float], cells=(3, 6, 12, 24), pad: int = 8):
        self.layers = []
        h, w = extent
        for cell in cells:
            gh = int(np.ceil((h + 2 * pad) / cell)) + 2
            gw = int(np.ceil((w + 2 * pad) / cell)) + 2
            self.layers.append((cell, rng.uniform(-1, 1, size=(gh, gw, 3))))
        self.pad = pad

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape + (3,))
        for n, (cell, grid) in enumerate(self.layers):
            gx = (x + self.pad) / cell
            gy = (y + self.pad) / cell
            gx = np.clip(gx, 0, grid.shape[1] - 1.000001)
            gy = np.clip(gy, 0, grid.shape[0] - 1.000001)
            x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
            fx, fy = (gx - x0)[..., None], (gy - y0)[..., None]
            v = (
                grid[y0, x0] * (1 - fx) * (1 - fy)
                + grid[y0, x0 + 1] * fx * (1 - fy)
                + grid[y0 + 1, x0] * (1 - fx) * fy
                + grid[y0 + 1, x0 + 1] * fx * fy
            )
            out += v * 0.6**n
        return np.clip(0.5 + 0.3 * out, 0.0, 1.0)


def _pos(R: np.ndarray, dx, dy=0.0) -> np.ndarray:
    R[..., 0] = dx
    R[..., 1] = dy
    return R


def constant_shift(H: int, W: int, d: int, seed: int) -> SyntheticScene:
    if d < 0 or d >= W:
        raise ValueError(f"shift {d} must lie in [0, {W})")
    rng = np.random.default_rng(seed)
    tex = Texture(rng, (H, W + d))
    ys, xs = np.mgrid[0:H, 0 : W + d].astype(float)
    T = tex(xs, ys)
    I0, I1 = T[:, :W], T[:, d : W + d]
    R0 = _pos(np.zeros((H, W, 2)), -float(d))
    R1 = _pos(np.zeros((H, W, 2)), float(d))
    x = np.arange(W)
    noc0 = np.broadcast_to(x >= d, (H, W)).copy()
    noc1 = np.broadcast_to(x <= W - 1 - d, (H, W)).copy()
    return SyntheticScene("constant_shift", I0, I1, R0, R1, noc0, noc1, seed, {"d": d})


def two_layer(H: int, W: int, d_bg: int, d_fg: int, rect: tuple[int, int, int, int] | None, seed: int) -> SyntheticScene:
    """Background at disparity ``d_bg`` with a fronto-parallel rectangle
    ``(x0, y0, x1, y1)`` (reference-view pixels, half-open) at ``d_fg > d_bg``."""
    if not 0 <= d_bg < d_fg < W:
        raise ValueError("need 0 <= d_bg < d_fg < W")
    if rect is None:
        rect = (W // 3, H // 4, W // 3 + W // 4, H - H // 4)
    x0, y0, x1, y1 = rect
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H) or x0 - d_fg < 0:
        raise ValueError(f"rectangle {rect} does not fit both views")
    rng = np.random.default_rng(seed)
    bg = Texture(rng, (H, W + d_bg))
    fg = Texture(rng, (y1 - y0, x1 - x0), cells=(2, 4, 8))
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    rows = (ys >= y0) & (ys < y1)
    in0 = rows & (xs >= x0) & (xs < x1)
    in1 = rows & (xs >= x0 - d_fg) & (xs < x1 - d_fg)
    I0 = np.where(in0[..., None], fg(xs - x0, ys - y0), bg(xs, ys))
    I1 = np.where(in1[..., None], fg(xs + d_fg - x0, ys - y0), bg(xs + d_bg, ys))
    R0 = np.zeros((H, W, 2))
    R0[..., 0] = np.where(in0, -d_fg, -d_bg)
    R1 = np.zeros((H, W, 2))
    R1[..., 0] = np.where(in1, d_fg, d_bg)
    # a pixel is visible in the other view iff it lands in the image and
    # is not covered there by a layer of different depth
    xi = np.arange(W)[None, :].repeat(H, 0)
    yi = np.arange(H)[:, None].repeat(W, 1)
    tgt0 = xi + R0[..., 0].astype(int)
    ok0 = (tgt0 >= 0) & (tgt0 <= W - 1)
    noc0 = ok0 & (in1[yi, np.clip(tgt0, 0, W - 1)] == in0)
    tgt1 = xi + R1[..., 0].astype(int)
    ok1 = (tgt1 >= 0) & (tgt1 <= W - 1)
    noc1 = ok1 & (in0[yi, np.clip(tgt1, 0, W - 1)] == in1)
    return SyntheticScene("two_layer", I0, I1, R0, R1, noc0, noc1, seed, {"d_bg": d_bg, "d_fg": d_fg, "rect": rect})


def smooth_warp(H: int, W: int, amp: float, freq: float, phase: float, tx: float, ty: int, seed: int) -> SyntheticScene:
    """Flow ``(amp * sin(freq * y + phase) + tx, ty)``; ``ty`` integer.

    The horizontal component depends on the row only, so the backward flow
    is exact under bilinear sampling and the consistency residual vanishes
    on visible pixels.
    """
    if int(ty) != ty:
        raise ValueError("vertical flow must be an integer")
    ty = int(ty)
    rng = np.random.default_rng(seed)
    margin = abs(amp) + abs(tx) + abs(ty) + 2
    tex = Texture(rng, (H + 2 * margin, W + 2 * margin), pad=int(margin) + 8)
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    fx0 = amp * np.sin(freq * ys + phase) + tx
    I0 = tex(xs, ys)
    src_y = ys - ty
    fx1 = amp * np.sin(freq * src_y + phase) + tx
    I1 = tex(xs - fx1, src_y)
    R0 = np.stack([fx0, np.full_like(fx0, ty)], axis=-1)
    R1 = np.stack([-fx1, np.full_like(fx1, -ty)], axis=-1)

    def inside(R):
        px, py = xs + R[..., 0], ys + R[..., 1]
        return (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)

    params = {"amp": amp, "freq": freq, "phase": phase, "tx": tx, "ty": ty}
    return SyntheticScene("smooth_warp", I0, I1, R0, R1, inside(R0), inside(R1), seed, params)


DEFAULTS = {
    "constant_shift": {"d": 4},
    "two_layer": {"d_bg": 2, "d_fg": 8, "rect": None},
    "smooth_warp": {"amp": 2.0, "freq": 2 * np.pi / 64, "phase": 0.0, "tx": 1.5, "ty": 1},
}


def gen_scene(kind: str, H: int, W: int, params: dict | None = None, seed: int = 0) -> SyntheticScene:
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")
    p = dict(DEFAULTS[kind])
    p.update(params or {})
    unknown = set(p) - set(DEFAULTS[kind])
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
    fn = {"constant_shift": constant_shift, "two_layer": two_layer, "smooth_warp": smooth_warp}[kind]
    return fn(H, W, **p, seed=seed)
