"""Closed-form operation counts.

Attention counts cover the three parameter-free stages (query-key
similarity, BilinearSoftmax, aggregation). Tensor counts cover every
parameterised linear or convolution map at two FLOPs per multiply-add.
"""
from __future__ import annotations

from dataclasses import dataclass

from .decoder import DecoderConfig


@dataclass(frozen=True)
class FlopsBreakdown:
    qk_flops: int = 0
    bsm_flops: int = 0
    agg_flops: int = 0
    tensor_flops: int = 0
    attn_memory: int = 0  # attention values held at once

    @property
    def attention_flops(self) -> int:
        return self.qk_flops + self.bsm_flops + self.agg_flops

    @property
    def total(self) -> int:
        return self.attention_flops + self.tensor_flops

    def __add__(self, other: "FlopsBreakdown") -> "FlopsBreakdown":
        return FlopsBreakdown(
            self.qk_flops + other.qk_flops,
            self.bsm_flops + other.bsm_flops,
            self.agg_flops + other.agg_flops,
            self.tensor_flops + other.tensor_flops,
            max(self.attn_memory, other.attn_memory),
        )


def attention_flops(H: int, W: int, h: int, c_k: int, c_v: int, w: int) -> FlopsBreakdown:
    if min(H, W, h, c_k, c_v, w) <= 0:
        raise ValueError("extents must be positive")
    n = H * W * h
    E = (w + 1) ** 2
    return FlopsBreakdown(
        qk_flops=n * c_k * E * 2,
        bsm_flops=n * (20 + E * 2 + w * w * 4 * 3),
        agg_flops=n * c_v * E * 2,
        attn_memory=n * E,
    )


def _lin(n: int, c_in: int, c_out: int) -> int:
    return 2 * n * c_in * c_out


def decoder_flops(cfg: DecoderConfig, H: int, W: int) -> FlopsBreakdown:
    """Counts for one decoder pass over a stereo/flow pair (both views)."""
    if H % 32 or W % 32:
        raise ValueError("image extents must be divisible by 32")
    views = 2
    ch = cfg.channels
    t = 0
    n4 = (H // 4) * (W // 4)
    t += _lin(n4, 4 * 4 * 3, ch[0])
    for s in range(4):
        stride = 4 << s
        n = (H // stride) * (W // stride)
        c = ch[s]
        if s > 0:
            t += _lin(n, 4 * ch[s - 1], c)
        r = cfg.mlp_ratio * c
        t += cfg.enc_depths[s] * (2 * n * 9 * c + _lin(n, c, c) + _lin(n, c, r) + _lin(n, r, c))
    n32 = (H // 32) * (W // 32)
    c32 = ch[3]
    t += 2 * _lin(n32, c32, c32)
    if cfg.task == "stereo":
        corr = 2 * 2 * (H // 32) * (W // 32) ** 2 * c32 // views
    else:
        corr = 2 * 2 * n32 * n32 * c32 // views
    t += corr
    att = FlopsBreakdown()
    h = cfg.heads
    for i in range(4):
        s = 3 - i
        stride = 4 << s
        hh, ww = H // stride, W // stride
        n = hh * ww
        c = ch[s]
        ck = c // h
        w = cfg.windows[i]
        E = (w + 1) ** 2
        rc = cfg.glu_ratio * c
        per_block = (
            _lin(n, c + 2 + 2 * h + 1, 3 * c) + _lin(n, c, c + 2 + 2 * h)  # self
            + _lin(n, c + 2, 4 * c) + _lin(n, c + h * E, c + 2)  # cross incl. gate
            + 2 * _lin(n, c, rc) + 2 * n * 9 * rc + _lin(n, rc, c)  # ConvGLU
        )
        t += cfg.depths[i] * per_block
        f = 2 if s > 0 else 4
        t += _lin(n, c, 9 * f * f)
        if s > 0:
            t += _lin(4 * n, c + ch[s - 1], ch[s - 1])
        one = attention_flops(hh, ww, h, ck, ck, w)
        for _ in range(2 * cfg.depths[i]):
            att = att + FlopsBreakdown(views * one.qk_flops, views * one.bsm_flops, views * one.agg_flops, 0,
                                       views * one.attn_memory)
    return att + FlopsBreakdown(tensor_flops=views * t)


def flops_count(H: int, W: int, h: int, c_k: int, c_v: int, w: int, decoder_cfg: DecoderConfig | None = None,
                image: tuple[int, int] | None = None) -> FlopsBreakdown:
    """Single-layer attention counts, plus whole-decoder counts when a
    config and image size are given."""
    out = attention_flops(H, W, h, c_k, c_v, w)
    if decoder_cfg is not None:
        ih, iw = image if image is not None else (H, W)
        out = out + decoder_flops(decoder_cfg, ih, iw)
    return out
