"""Hierarchical cross-view decoder for stereo and optical flow.

Both views travel through the network stacked on the batch axis
(``[2, H, W, C]``, reference view first). Cross-attention reads keys and
values from the batch-flipped tensor, so one pass refines the relative
positions of both views with shared weights.

Scales are addressed by their stride (32, 16, 8, 4); relative positions are
always in pixels of the scale they live at.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .attention import (
    AttnConfig,
    ConvGLUWeights,
    LayerWeights,
    convglu,
    fan_in_uniform,
    init_convglu,
    init_layer_weights,
    match_attention,
)
from .autograd import Var, as_var, get_dtype
from .ops import _emit

STRIDES = (4, 8, 16, 32)
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


@dataclass(frozen=True)
class DecoderConfig:
    """Architecture and loss constants.

    ``channels`` and ``enc_depths`` run fine to coarse (strides 4..32);
    ``depths`` and ``windows`` run in decoding order, coarse to fine.
    """

    task: str = "stereo"
    channels: tuple[int, ...] = (16, 24, 32, 48)
    enc_depths: tuple[int, ...] = (1, 1, 1, 1)
    depths: tuple[int, ...] = (2, 2, 2, 1)
    windows: tuple[int, ...] = (5, 5, 3, 3)
    heads: int = 2
    k_init: int = 5
    A: float = 1.0
    eps: float = 0.01
    gamma_loss: float = 0.9
    similarity: str = "neg_l1"
    mlp_ratio: int = 2
    glu_ratio: int = 2

    def __post_init__(self):
        if self.task not in ("stereo", "flow"):
            raise ValueError(f"task must be 'stereo' or 'flow', got {self.task!r}")
        if any(w % 2 == 0 or w < 1 for w in self.windows):
            raise ValueError("window sizes must be odd")
        if not (len(self.channels) == len(self.enc_depths) == len(self.depths) == len(self.windows) == 4):
            raise ValueError("four scales expected")
        if any(c % self.heads for c in self.channels):
            raise ValueError("channels must divide evenly into heads")

    @property
    def n_cross(self) -> int:
        return sum(self.depths)

    @property
    def n_self(self) -> int:
        return self.n_cross + 4


PRESETS = {
    "desk": DecoderConfig(),
    "T": DecoderConfig(channels=(32, 64, 128, 160), enc_depths=(2, 2, 6, 2), depths=(8, 8, 8, 2), heads=4),
    "S": DecoderConfig(channels=(64, 128, 160, 320), enc_depths=(2, 2, 6, 2), depths=(8, 8, 8, 2), heads=4),
    "B": DecoderConfig(channels=(128, 256, 320, 512), enc_depths=(2, 2, 6, 2), depths=(8, 8, 8, 2), heads=4),
}


def preset(name: str, task: str = "stereo", **overrides) -> DecoderConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], task=task, **overrides)


# ------------------------------------------------------------ functional parts


def avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping ``k x k`` mean over axes 1, 2 of ``[B, H, W, C]``."""
    B, H, W = x.shape[:3]
    return x.reshape(B, H // k, k, W // k, k, *x.shape[3:]).mean(axis=(2, 4))


def _unfold_index(h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    iy = np.stack([np.clip(ys + dy, 0, h - 1) for dy in (-1, 0, 1) for _ in (-1, 0, 1)], axis=-1)
    ix = np.stack([np.clip(xs + dx, 0, w - 1) for _ in (-1, 0, 1) for dx in (-1, 0, 1)], axis=-1)
    return iy * w + ix  # [h, w, 9]


def convex_combine(weights, field, factor: int) -> Var:
    """Upsample ``field[B, h, w, C]`` by ``factor`` with convex 3x3 weights.

    ``weights[B, h, w, f, f, 9]`` must sum to one over the last axis. The
    neighbourhood is replicate-padded and values are scaled by ``factor`` so
    positions come out in fine-scale pixels.
    """
    weights, field = as_var(weights), as_var(field)
    B, h, w, C = field.shape
    f = factor
    nb = _unfold_index(h, w)
    rows = (np.arange(B).reshape(B, 1, 1, 1) * h * w + nb).reshape(B, h, w, 9)
    U = field.data.reshape(B * h * w, C)[rows]  # [B, h, w, 9, C]
    Wm = weights.data.reshape(B, h, w, f * f, 9)
    out = f * (Wm @ U)  # [B, h, w, f*f, C]
    y = out.reshape(B, h, w, f, f, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h * f, w * f, C)

    def backward(gs):
        g = gs[0].reshape(B, h, f, w, f, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h, w, f * f, C)
        gw = gf = None
        if weights.tracked:
            gw = (f * (g @ np.swapaxes(U, -1, -2))).reshape(weights.shape)
        if field.tracked:
            gU = f * (np.swapaxes(Wm, -1, -2) @ g)  # [B, h, w, 9, C]
            full = (rows[..., None] * C + np.arange(C)).ravel()
            gf = np.bincount(full, weights=gU.ravel(), minlength=B * h * w * C).reshape(field.shape)
        return gw, gf

    return _emit("convex_combine", (weights, field), y, backward)


def convex_upsample(R, guide, W_up, b_up, factor: int) -> Var:
    """Learned convex upsampling of a position field guided by features."""
    guide = as_var(guide)
    B, h, w, _ = guide.shape
    logits = ops.reshape(ops.linear(guide, W_up, b_up), (B, h, w, factor, factor, 9))
    return convex_combine(ops.softmax_lastdim(logits), R, factor)


def consistency(R, A: float):
    """Cross-view consistency of stacked positions ``R[2, H, W, 2]``.

    Returns ``(mask [2, H, W] float, residual Var [2, H, W])`` where the
    residual is the L1 norm of ``R_v + R_other(p + R_v)``.
    """
    R = as_var(R)
    _, H, W, _ = R.shape
    grid = ops.identity_grid(H, W, dtype=R.data.dtype)
    back = ops.bilinear_sample(ops.flip_batch(R), ops.add(R, grid))
    residual = ops.sum_(ops.abs_(ops.add(R, back)), axis=-1)
    mask = (residual.data <= A).astype(R.data.dtype)
    return mask, residual


def consistency_check(R0, R1, A: float = 1.0):
    """Per-view masks and residuals for a pair of position fields."""
    R = np.stack([np.asarray(as_var(R0).data), np.asarray(as_var(R1).data)])
    mask, residual = consistency(R, A)
    return mask[0], mask[1], residual.data


def _box_mean(p: np.ndarray, k: int, axes: tuple[int, ...]) -> np.ndarray:
    """Zero-padded ``k``-wide moving mean along each of ``axes``."""
    r = k // 2
    for ax in axes:
        pad = [(0, 0)] * p.ndim
        pad[ax] = (r, r)
        c = np.cumsum(np.pad(p, pad), axis=ax)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
        n = p.shape[ax]
        p = (np.take(c, np.arange(k, n + k), axis=ax) - np.take(c, np.arange(0, n), axis=ax)) / k
    return p


def _correlation_maps(F, weights: dict[str, Var]):
    F = as_var(F)
    Fn = ops.layer_norm(F, weights["init.ln.g"], weights["init.ln.b"])
    return ops.linear(Fn, weights["init.Wa"]), ops.linear(Fn, weights["init.Wb"])


def _symmetric_product(A0, A1, B0, B1, scale):
    """``(A0 B1^T + B0 A1^T) * scale``: swapping the views transposes the result."""
    left = ops.bmm(A0, ops.transpose(B1, (0, 2, 1)))
    right = ops.bmm(B0, ops.transpose(A1, (0, 2, 1)))
    return ops.mul(ops.add(left, right), scale)


@dataclass
class InitResult:
    R: Var  # [2, h, w, 2]
    logits: Var | None  # stereo: masked disparity logits [2, h, w, W]
    valid: np.ndarray | None  # stereo: [2, h, w, W] candidate validity


def initial_correlation_stereo(F, weights: dict[str, Var], k: int = 5) -> InitResult:
    """Epipolar correlation, disparity volume and local soft-argmax.

    ``F`` stacks both views. Reference-view candidates read ``x - d``,
    target-view candidates read ``x + d``; the results are signed as
    ``(-d0, 0)`` and ``(+d1, 0)``.
    """
    F = as_var(F)
    _, h, w, c = F.shape
    A, Bm = _correlation_maps(F, weights)
    A0, A1 = ops.index(A, 0), ops.index(A, 1)
    B0, B1 = ops.index(Bm, 0), ops.index(Bm, 1)
    C = _symmetric_product(A0, A1, B0, B1, 0.5 / math.sqrt(c))  # [h, x0, x1]
    xs = np.arange(w)[:, None]
    d = np.arange(w)[None, :]
    src0, src1 = xs - d, xs + d
    valid = np.stack([np.broadcast_to((src0 >= 0), (h, w, w)), np.broadcast_to((src1 <= w - 1), (h, w, w))])
    V0 = ops.gather_last(C, np.clip(src0, 0, w - 1))
    V1 = ops.gather_last(ops.transpose(C, (0, 2, 1)), np.clip(src1, 0, w - 1))
    V = ops.concat([ops.reshape(V0, (1, h, w, w)), ops.reshape(V1, (1, h, w, w))], axis=0)
    logits = ops.add(V, np.where(valid, 0.0, -1e9))
    P = ops.softmax_lastdim(logits)
    center = _box_mean(P.data, k, (3,)).argmax(axis=-1)
    win = center[..., None] + np.arange(-(k // 2), k // 2 + 1)
    inside = (win >= 0) & (win <= w - 1)
    Pw = ops.mul(ops.gather_last(P, np.clip(win, 0, w - 1)), inside)
    disp = ops.div(ops.sum_(ops.mul(Pw, win.astype(get_dtype())), axis=-1), ops.sum_(Pw, axis=-1))
    sign = np.array([-1.0, 1.0]).reshape(2, 1, 1)
    x = ops.reshape(ops.mul(disp, sign), (2, h, w, 1))
    R = ops.concat([x, np.zeros((2, h, w, 1))])
    return InitResult(R, logits, valid)


def initial_correlation_flow(F, weights: dict[str, Var], k: int = 5) -> InitResult:
    """All-pairs correlation with a joint softmax over target positions,
    then a local soft-argmax around the best ``k x k`` averaged cell."""
    F = as_var(F)
    _, h, w, c = F.shape
    n = h * w
    A, Bm = _correlation_maps(F, weights)
    A = ops.reshape(A, (2, n, -1))
    Bm = ops.reshape(Bm, (2, n, -1))
    A0, A1 = ops.index(A, slice(0, 1)), ops.index(A, slice(1, 2))
    B0, B1 = ops.index(Bm, slice(0, 1)), ops.index(Bm, slice(1, 2))
    C = _symmetric_product(A0, A1, B0, B1, 0.5 / math.sqrt(c))  # [1, n, n]
    C = ops.concat([C, ops.transpose(C, (0, 2, 1))], axis=0)
    P = ops.softmax_lastdim(C)
    avg = _box_mean(P.data.reshape(2, n, h, w), k, (2, 3)).reshape(2, n, n)
    best = avg.argmax(axis=-1)
    cy, cx = best // w, best % w
    off = np.arange(-(k // 2), k // 2 + 1)
    ty = (cy[..., None, None] + off[:, None]) + 0 * off[None, :]
    tx = (cx[..., None, None] + off[None, :]) + 0 * off[:, None]
    ty, tx = ty.reshape(2, n, k * k), tx.reshape(2, n, k * k)
    inside = (ty >= 0) & (ty <= h - 1) & (tx >= 0) & (tx <= w - 1)
    Pw = ops.mul(ops.gather_last(P, np.clip(ty, 0, h - 1) * w + np.clip(tx, 0, w - 1)), inside)
    den = ops.sum_(Pw, axis=-1)
    ex = ops.div(ops.sum_(ops.mul(Pw, tx.astype(get_dtype())), axis=-1), den)
    ey = ops.div(ops.sum_(ops.mul(Pw, ty.astype(get_dtype())), axis=-1), den)
    grid = ops.identity_grid(h, w).reshape(1, n, 2)
    target = ops.concat([ops.reshape(ex, (2, n, 1)), ops.reshape(ey, (2, n, 1))])
    R = ops.reshape(ops.sub(target, grid), (2, h, w, 2))
    return InitResult(R, None, None)


# -------------------------------------------------------------------- model


@dataclass
class ScaledR:
    R: Var  # [2, h, w, 2]
    stride: int


@dataclass
class CrossRecord:
    R: Var
    mask: np.ndarray  # [2, h, w]
    residual: Var  # [2, h, w]
    stride: int


@dataclass
class DecoderOutput:
    R: Var  # [2, H, W, 2] full resolution
    sR: Var  # [2, H, W, h, 2]
    init: InitResult
    self_R: list[ScaledR] = field(default_factory=list)
    cross: list[CrossRecord] = field(default_factory=list)
    alphas: list[Var] = field(default_factory=list)

    @property
    def disparity(self) -> np.ndarray:
        return -self.R.data[0, ..., 0]

    @property
    def flow(self) -> np.ndarray:
        return self.R.data[0]


class MatchDecoder:
    """Parameters plus forward pass. ``params`` maps stable names to Vars."""

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Var] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> Var:
        v = Var(np.asarray(arr, dtype=get_dtype()), True, name=name)
        self.params[name] = v
        return v

    def _ln(self, name: str, c: int):
        self._add(f"{name}.g", np.ones(c))
        self._add(f"{name}.b", np.zeros(c))

    def _build(self, rng: np.random.Generator):
        cfg = self.cfg
        ch = cfg.channels
        zeros = np.zeros
        # encoder, fine to coarse
        self._add("enc.stem.k", fan_in_uniform(rng, (4, 4, 3, ch[0]), fan_in=48))
        self._add("enc.stem.b", zeros(ch[0]))
        self._ln("enc.stem.ln", ch[0])
        for s in range(4):
            c = ch[s]
            if s > 0:
                self._ln(f"enc{s}.down.ln", ch[s - 1])
                self._add(f"enc{s}.down.k", fan_in_uniform(rng, (2, 2, ch[s - 1], c), fan_in=4 * ch[s - 1]))
                self._add(f"enc{s}.down.b", zeros(c))
            for j in range(cfg.enc_depths[s]):
                p = f"enc{s}.{j}"
                self._ln(f"{p}.ln1", c)
                self._add(f"{p}.dw.k", fan_in_uniform(rng, (3, 3, 1, c), fan_in=9))
                self._add(f"{p}.dw.b", zeros(c))
                self._add(f"{p}.pw.W", fan_in_uniform(rng, (c, c)))
                self._add(f"{p}.pw.b", zeros(c))
                self._ln(f"{p}.ln2", c)
                self._add(f"{p}.mlp.W1", fan_in_uniform(rng, (c, cfg.mlp_ratio * c)))
                self._add(f"{p}.mlp.b1", zeros(cfg.mlp_ratio * c))
                self._add(f"{p}.mlp.W2", fan_in_uniform(rng, (cfg.mlp_ratio * c, c)))
                self._add(f"{p}.mlp.b2", zeros(c))
        # initial correlation at the coarsest scale
        c32 = ch[3]
        self._ln("init.ln", c32)
        self._add("init.Wa", fan_in_uniform(rng, (c32, c32)))
        self._add("init.Wb", fan_in_uniform(rng, (c32, c32)))
        # decoder blocks, coarse to fine
        self.blocks: list[list[tuple[LayerWeights, LayerWeights, ConvGLUWeights]]] = []
        h = cfg.heads
        for i, s in enumerate(reversed(range(4))):
            c = ch[s]
            scfg, ccfg = self.attn_configs(i)
            stage = []
            for j in range(cfg.depths[i]):
                p = f"dec{i}.{j}"
                self._ln(f"{p}.self.ln", c)
                sw = init_layer_weights(scfg, c + 2 + 2 * h + 1, c, rng)
                self._ln(f"{p}.cross.ln", c)
                cw = init_layer_weights(ccfg, c + 2, c, rng)
                self._ln(f"{p}.glu.ln", c)
                gw = init_convglu(c, rng, cfg.glu_ratio)
                for prefix, wts in ((f"{p}.self.", sw), (f"{p}.cross.", cw), (f"{p}.glu.", gw)):
                    for name, v in wts.named(prefix).items():
                        v.name = name
                        self.params[name] = v
                stage.append((sw, cw, gw))
            self.blocks.append(stage)
            f = 2 if s > 0 else 4
            self._add(f"dec{i}.up.W", fan_in_uniform(rng, (c, 9 * f * f)))
            self._add(f"dec{i}.up.b", zeros(9 * f * f))
            if s > 0:
                cn = ch[s - 1]
                self._add(f"dec{i}.upconv.W", fan_in_uniform(rng, (c + cn, cn)))
                self._add(f"dec{i}.upconv.b", zeros(cn))

    def attn_configs(self, i: int) -> tuple[AttnConfig, AttnConfig]:
        """Self and cross layer configs for decoding stage ``i`` (0 = coarsest)."""
        cfg = self.cfg
        c = cfg.channels[3 - i]
        ck = c // cfg.heads
        common = dict(w=cfg.windows[i], heads=cfg.heads, c_k=ck, c_v=ck, similarity=cfg.similarity)
        return (
            AttnConfig(kind="self", inject_weights=False, gated=False, **common),
            AttnConfig(kind="cross", inject_weights=True, gated=True, **common),
        )

    def n_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    # forward --------------------------------------------------------------

    def _p(self, name: str) -> Var:
        return self.params[name]

    def _ln_apply(self, x, name: str) -> Var:
        return ops.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def encoder_forward(self, images) -> list[Var]:
        """Features at strides 4, 8, 16, 32 for a batch of images ``[B, H, W, 3]``."""
        images = as_var(images)
        _, H, W, _ = images.shape
        if H % 32 or W % 32:
            raise ValueError(f"image extents {H}x{W} must be divisible by 32")
        p = self._p
        x = ops.conv2d(images, p("enc.stem.k"), p("enc.stem.b"), stride=4)
        x = self._ln_apply(x, "enc.stem.ln")
        feats = []
        for s in range(4):
            if s > 0:
                x = self._ln_apply(x, f"enc{s}.down.ln")
                x = ops.conv2d(x, p(f"enc{s}.down.k"), p(f"enc{s}.down.b"), stride=2)
            c = x.shape[-1]
            for j in range(self.cfg.enc_depths[s]):
                q = f"enc{s}.{j}"
                y = self._ln_apply(x, f"{q}.ln1")
                y = ops.conv2d(y, p(f"{q}.dw.k"), p(f"{q}.dw.b"), padding=1, groups=c)
                x = ops.add(x, ops.linear(y, p(f"{q}.pw.W"), p(f"{q}.pw.b")))
                y = self._ln_apply(x, f"{q}.ln2")
                y = ops.gelu(ops.linear(y, p(f"{q}.mlp.W1"), p(f"{q}.mlp.b1")))
                x = ops.add(x, ops.linear(y, p(f"{q}.mlp.W2"), p(f"{q}.mlp.b2")))
            feats.append(x)
        return feats

    def initial(self, F32) -> InitResult:
        fn = initial_correlation_stereo if self.cfg.task == "stereo" else initial_correlation_flow
        return fn(F32, self.params, self.cfg.k_init)

    def forward(self, I0, I1) -> DecoderOutput:
        """Run both views. Images are ``[H, W, 3]`` floats in [0, 1]."""
        cfg = self.cfg
        h = cfg.heads
        imgs = (np.stack([np.asarray(I0), np.asarray(I1)]) - IMAGE_MEAN) / IMAGE_STD
        feats = self.encoder_forward(imgs)
        F = feats[3]
        init = self.initial(F)
        R = init.R
        _, hh, ww, _ = F.shape
        sR = Var(np.zeros((2, hh, ww, h, 2), dtype=get_dtype()))
        M = np.ones((2, hh, ww, 1), dtype=get_dtype())
        out = DecoderOutput(R=R, sR=sR, init=init)
        for i, s in enumerate(reversed(range(4))):
            stride = STRIDES[s]
            scfg, ccfg = self.attn_configs(i)
            for j, (sw, cw, gw) in enumerate(self.blocks[i]):
                p = f"dec{i}.{j}"
                B_, hh, ww, c = F.shape
                # self layer: positions ride along as features, sampling uses sR
                Fn = self._ln_apply(F, f"{p}.self.ln")
                beta_h = ops.concat([sw.beta] * h)
                sR_flat = ops.reshape(sR, (2, hh, ww, 2 * h))
                Fh = ops.concat([Fn, ops.mul(R, sw.beta), ops.mul(sR_flat, beta_h), M])
                res = match_attention(Fh, Fh, sR, scfg, sw)
                F = ops.add(F, res.F)
                R = ops.add(R, res.R_delta)
                sR = ops.add(sR, res.sR_delta)
                out.alphas.append(res.alpha)
                out.self_R.append(ScaledR(R, stride))
                # cross layer
                Fn = self._ln_apply(F, f"{p}.cross.ln")
                Fh = ops.concat([Fn, ops.mul(R, cw.beta)])
                res = match_attention(Fh, ops.flip_batch(Fh), R, ccfg, cw)
                F = ops.add(F, res.F)
                R = ops.add(R, res.R_delta)
                out.alphas.append(res.alpha)
                mask, residual = consistency(R, cfg.A)
                out.cross.append(CrossRecord(R, mask, residual, stride))
                M = mask[..., None]
                # feed-forward
                F = ops.add(F, convglu(self._ln_apply(F, f"{p}.glu.ln"), gw))
            f = 2 if s > 0 else 4
            both = ops.concat([R, ops.reshape(sR, (2, hh, ww, 2 * h))])
            up = convex_upsample(both, F, self._p(f"dec{i}.up.W"), self._p(f"dec{i}.up.b"), f)
            R, sRf = ops.split(up, [2, 2 * h])
            sR = ops.reshape(sRf, (2, hh * f, ww * f, h, 2))
            out.self_R.append(ScaledR(R, stride // f))
            if s > 0:
                Fu = ops.upsample_nearest(F, 2)
                F = ops.linear(ops.concat([Fu, feats[s - 1]]), self._p(f"dec{i}.upconv.W"), self._p(f"dec{i}.upconv.b"))
                M = consistency(ops.stop_gradient(R), cfg.A)[0][..., None]
        out.R, out.sR = R, sR
        return out

    __call__ = forward
