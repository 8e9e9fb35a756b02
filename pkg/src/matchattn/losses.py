"""Training objective: initial-estimate loss, discounted per-layer L1 on
self-layer positions, and discounted masked L1 plus consistency penalty on
cross-layer positions. Only reference-view ground truth is used.

All L1 terms are expressed in full-resolution pixels so layers at
different scales are comparable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Var, get_dtype
from .decoder import DecoderConfig, DecoderOutput, avg_pool


@dataclass
class LossReport:
    total: Var
    l_init: Var
    l_self: Var
    l_cross: Var
    self_terms: list[float]
    cross_terms: list[float]

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("total", "l_init", "l_self", "l_cross")}


def discount_weights(n: int, gamma: float) -> np.ndarray:
    """``gamma ** (n - l)`` for ``l = 1..n``: later layers weigh more."""
    return gamma ** (n - np.arange(1, n + 1, dtype=np.float64))


def downsample_gt(gt: np.ndarray, valid: np.ndarray, stride: int):
    """Ground-truth positions at a coarser stride, in that stride's pixels.

    A coarse pixel is valid only when every full-resolution pixel under it
    is valid.
    """
    if stride == 1:
        return gt, valid
    v = valid.astype(np.float64)[None, ..., None]
    g = gt[None] * v
    cnt = avg_pool(v, stride)[0, ..., 0]
    mean = avg_pool(g, stride)[0] / np.maximum(cnt, 1e-12)[..., None]
    return mean / stride, cnt > 1 - 1e-9


def _masked_l1(R: Var, gt: np.ndarray, weight: np.ndarray, stride: int) -> Var:
    """Mean over ``weight > 0`` pixels of ``||gt - R||_1`` in full-res pixels."""
    n = float(weight.sum())
    err = ops.sum_(ops.abs_(ops.sub(R, gt)), axis=-1)
    return ops.mul(ops.sum_(ops.mul(err, weight)), stride / max(n, 1.0))


def _init_loss(out: DecoderOutput, gt: np.ndarray, valid: np.ndarray, cfg: DecoderConfig) -> Var:
    R0 = ops.index(out.init.R, 0)
    stride = 32
    g, v = downsample_gt(gt, valid, stride)
    if cfg.task == "flow":
        return _masked_l1(R0, g, v.astype(get_dtype()), stride)
    # two-bin encoding of the coarse disparity against the reference volume
    logits = ops.index(out.init.logits, 0)
    D = logits.shape[-1]
    d = np.clip(-g[..., 0], 0, D - 1)
    lo = np.floor(d).astype(np.int64)
    hi = np.minimum(lo + 1, D - 1)
    w_hi = d - lo
    target = np.zeros(logits.shape, dtype=get_dtype())
    np.put_along_axis(target, lo[..., None], (1 - w_hi)[..., None], axis=-1)
    # hi == lo only when d sits on the last bin; the sum keeps the mass
    hi_vals = np.take_along_axis(target, hi[..., None], axis=-1) + w_hi[..., None]
    np.put_along_axis(target, hi[..., None], hi_vals, axis=-1)
    ok = v & np.take_along_axis(out.init.valid[0], hi[..., None], axis=-1)[..., 0]
    logp = ops.log_softmax_lastdim(logits)
    ce = ops.mul(ops.sum_(ops.mul(logp, target), axis=-1), -1.0)
    n = max(float(ok.sum()), 1.0)
    return ops.mul(ops.sum_(ops.mul(ce, ok.astype(get_dtype()))), 1.0 / n)


def loss_total(out: DecoderOutput, gt, cfg: DecoderConfig, valid=None) -> LossReport:
    """Full objective for one decoded pair.

    ``gt`` is the reference-view relative position ``[H, W, 2]`` at full
    resolution; ``valid`` optionally marks pixels with known ground truth.
    """
    gt = np.asarray(gt, dtype=np.float64)
    H, W = out.R.shape[1:3]
    if gt.shape != (H, W, 2):
        raise ValueError(f"ground truth shape {gt.shape} does not match prediction {(H, W, 2)}")
    valid = np.ones((H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    dt = get_dtype()

    l_init = _init_loss(out, gt, valid, cfg)

    ns = len(out.self_R)
    ws = discount_weights(ns, cfg.gamma_loss)
    l_self = Var(np.zeros((), dtype=dt))
    self_terms = []
    for wgt, rec in zip(ws, out.self_R):
        g, v = downsample_gt(gt, valid, rec.stride)
        term = _masked_l1(ops.index(rec.R, 0), g, v.astype(dt), rec.stride)
        self_terms.append(float(term.data))
        l_self = ops.add(l_self, ops.mul(term, wgt))

    nc = len(out.cross)
    wc = discount_weights(nc, cfg.gamma_loss)
    l_cross = Var(np.zeros((), dtype=dt))
    cross_terms = []
    for wgt, rec in zip(wc, out.cross):
        g, v = downsample_gt(gt, valid, rec.stride)
        m = rec.mask[0]
        term = _masked_l1(ops.index(rec.R, 0), g, (v * m).astype(dt), rec.stride)
        cons = ops.mul(ops.sum_(ops.mul(ops.index(rec.residual, 0), m)), rec.stride / max(float(m.sum()), 1.0))
        term = ops.add(term, ops.mul(cons, cfg.eps))
        cross_terms.append(float(term.data))
        l_cross = ops.add(l_cross, ops.mul(term, wgt))

    total = ops.add(ops.add(l_init, l_self), l_cross)
    return LossReport(total, l_init, l_self, l_cross, self_terms, cross_terms)
