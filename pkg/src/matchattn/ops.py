"""Dense-array ops with analytic backward passes.

Layout conventions: feature maps are channels-last ``[B, H, W, C]``;
coordinates are ``(x, y)`` pairs in the trailing axis. Every op returns a
:class:`~matchattn.autograd.Var` and records its backward closure on the
active tape when at least one input is tracked.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import NonFiniteError, Var, as_var, current_tape, get_dtype

CHECK_FINITE = True
GELU_C = math.sqrt(2.0 / math.pi)


def _emit(name: str, inputs: Sequence[Var], data: np.ndarray | tuple, backward) -> Var | tuple[Var, ...]:
    """Wrap op results, check finiteness and record the op if needed."""
    multi = isinstance(data, tuple)
    arrays = data if multi else (data,)
    if CHECK_FINITE:
        for a in arrays:
            if not np.isfinite(a).all():
                raise NonFiniteError(f"op {name!r} produced a non-finite value")
    outs = tuple(Var(a) for a in arrays)
    tape = current_tape()
    if tape is not None and any(v.tracked for v in inputs):
        for o in outs:
            o.tracked = True
        tape.record(name, inputs, outs, backward)
    return outs if multi else outs[0]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def stop_gradient(x) -> Var:
    """Same values, cut from the record."""
    return Var(as_var(x).data)


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(gs):
        (g,) = gs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(gs):
        (g,) = gs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(gs):
        (g,) = gs
        ga = _unbroadcast(g * b.data, a.shape) if a.tracked else None
        gb = _unbroadcast(g * a.data, b.shape) if b.tracked else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    y = a.data / b.data

    def backward(gs):
        g = gs[0]
        ga = _unbroadcast(g / b.data, a.shape) if a.tracked else None
        gb = _unbroadcast(-g * y / b.data, b.shape) if b.tracked else None
        return ga, gb

    return _emit("div", (a, b), y, backward)


def abs_(x) -> Var:
    """|x| with subgradient sign(0) = 0."""
    x = as_var(x)

    def backward(gs):
        return (gs[0] * np.sign(x.data),)

    return _emit("abs", (x,), np.abs(x.data), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)

    def backward(gs):
        g = gs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------- shapes


def reshape(x, shape) -> Var:
    x = as_var(x)

    def backward(gs):
        return (gs[0].reshape(x.shape),)

    return _emit("reshape", (x,), x.data.reshape(shape), backward)


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(gs):
        g = gs[0]
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _emit("concat", xs, np.concatenate([x.data for x in xs], axis=axis), backward)


def split(x, sizes: Sequence[int], axis: int = -1) -> tuple[Var, ...]:
    x = as_var(x)
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of extent {x.shape[axis]}")
    parts = tuple(
        np.take(x.data, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes))
    )

    def backward(gs):
        filled = [
            g if g is not None else np.zeros_like(p) for g, p in zip(gs, parts)
        ]
        return (np.concatenate(filled, axis=axis),)

    return _emit("split", (x,), parts, backward)


def transpose(x, axes: Sequence[int]) -> Var:
    x = as_var(x)
    inv = np.argsort(axes)

    def backward(gs):
        return (np.transpose(gs[0], inv),)

    return _emit("transpose", (x,), np.ascontiguousarray(np.transpose(x.data, axes)), backward)


def index(x, key) -> Var:
    """``x[key]`` for any numpy key; repeated entries accumulate in backward."""
    x = as_var(x)

    def backward(gs):
        g = np.zeros_like(x.data)
        np.add.at(g, key, gs[0])
        return (g,)

    return _emit("index", (x,), np.array(x.data[key]), backward)


def flip_batch(x) -> Var:
    """Reverse the leading axis: swaps the two views of a stacked pair."""
    x = as_var(x)

    def backward(gs):
        return (gs[0][::-1].copy(),)

    return _emit("flip_batch", (x,), x.data[::-1].copy(), backward)


def gather_last(x, idx: np.ndarray) -> Var:
    """``y[..., k] = x[..., idx[..., k]]``; repeated indices accumulate in backward."""
    x = as_var(x)
    idx = np.asarray(idx)
    lead = x.shape[:-1]
    n = x.shape[-1]
    idx_b = np.broadcast_to(idx, lead + idx.shape[-1:])
    y = np.take_along_axis(x.data, idx_b, axis=-1)

    def backward(gs):
        g = gs[0]
        rows = np.arange(int(np.prod(lead, dtype=np.int64)))[:, None] * n
        flat = (rows + idx_b.reshape(-1, idx_b.shape[-1])).ravel()
        out = np.bincount(flat, weights=g.ravel(), minlength=x.data.size)
        return (out.reshape(x.shape).astype(x.data.dtype),)

    return _emit("gather_last", (x,), y, backward)


# --------------------------------------------------------------- linear algebra


def linear(x, W, b=None) -> Var:
    """``y = x @ W (+ b)`` over the last axis of ``x``."""
    x, W = as_var(x), as_var(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input has {x.shape[-1]} channels, weight expects {W.shape[0]}")
    inputs = [x, W]
    y = x.data @ W.data
    if b is not None:
        b = as_var(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match {W.shape[1]} outputs")
        inputs.append(b)
        y = y + b.data

    def backward(gs):
        g = gs[0]
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ W.data.T) if x.tracked else None
        gW = (x.data.reshape(-1, x.shape[-1]).T @ g2) if W.tracked else None
        out = [gx, gW]
        if b is not None:
            out.append(g2.sum(axis=0) if b.tracked else None)
        return out

    return _emit("linear", inputs, y, backward)


def bmm(a, b) -> Var:
    """Batched matmul over the two trailing axes."""
    a, b = as_var(a), as_var(b)

    def backward(gs):
        g = gs[0]
        ga = g @ np.swapaxes(b.data, -1, -2) if a.tracked else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.tracked else None
        return ga, gb

    return _emit("bmm", (a, b), a.data @ b.data, backward)


# -------------------------------------------------------------- normalization


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Var:
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(gs):
        g = gs[0]
        gxhat = g * gain.data
        c = x.shape[-1]
        gx = inv / c * (c * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gain, bias), y, backward)


def softmax_lastdim(x) -> Var:
    x = as_var(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(gs):
        g = gs[0]
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, backward)


def log_softmax_lastdim(x) -> Var:
    x = as_var(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(gs):
        g = gs[0]
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), y, backward)


# ---------------------------------------------------------------- activations


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Var:
    x = as_var(x)
    s = _sigmoid(x.data)

    def backward(gs):
        return (gs[0] * s * (1.0 - s),)

    return _emit("sigmoid", (x,), s, backward)


def silu(x) -> Var:
    x = as_var(x)
    s = _sigmoid(x.data)

    def backward(gs):
        return (gs[0] * (s * (1.0 + x.data * (1.0 - s))),)

    return _emit("silu", (x,), x.data * s, backward)


def gelu(x) -> Var:
    """GELU, tanh approximation."""
    x = as_var(x)
    z = x.data
    inner = GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)

    def backward(gs):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * z**2)
        return (gs[0] * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _emit("gelu", (x,), 0.5 * z * (1.0 + t), backward)


def activation(x, kind: str) -> Var:
    if kind == "gelu":
        return gelu(x)
    if kind == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- convolution


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Var:
    """Zero-padded cross-correlation on ``[B, H, W, C_in]``.

    ``kernel`` has shape ``[kh, kw, C_in // groups, C_out]``. The output is
    accumulated tap by tap in the fixed order (ky, kx, input channel), each
    step a rounded multiply followed by a rounded add, so a scalar nested
    loop with the same order reproduces it bit for bit.
    """
    x, kernel = as_var(x), as_var(kernel)
    B, H, W, cin = x.shape
    kh, kw, cg, cout = kernel.shape
    if cin % groups or cout % groups or cin // groups != cg:
        raise ValueError(f"conv2d: C_in={cin}, groups={groups} incompatible with kernel {kernel.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    og = cout // groups
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    k = kernel.data.reshape(kh, kw, cg, groups, og)
    out = np.zeros((B, Ho, Wo, groups, og), dtype=np.result_type(x.data, kernel.data))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
            for c in range(cg):
                out += patch[..., c::cg, None] * k[i, j, c]
    out = out.reshape(B, Ho, Wo, cout)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_var(bias)
        inputs.append(bias)
        out = out + bias.data

    def backward(gs):
        g = gs[0].reshape(B, Ho, Wo, groups, og)
        gk = np.zeros_like(k) if kernel.tracked else None
        gxp = np.zeros_like(xp) if x.tracked else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                patch = xp[sl].reshape(B, Ho, Wo, groups, cg)
                if gk is not None:
                    # [groups, cg, og] = sum over pixels of patch x g
                    gk[i, j] = np.einsum("nqc,nqo->cqo", patch.reshape(-1, groups, cg), g.reshape(-1, groups, og))
                if gxp is not None:
                    gxp[sl] += np.einsum("bhwqo,cqo->bhwqc", g, k[i, j]).reshape(B, Ho, Wo, cin)
        res = [None, None]
        if gxp is not None:
            res[0] = gxp[:, padding : padding + H, padding : padding + W, :]
        if gk is not None:
            res[1] = gk.reshape(kernel.shape)
        if bias is not None:
            res.append(gs[0].reshape(-1, cout).sum(axis=0))
        return res

    return _emit("conv2d", inputs, out, backward)


# ------------------------------------------------------------------- sampling


def _bilinear_setup(H: int, W: int, coords: np.ndarray):
    cx = np.clip(coords[..., 0], 0.0, W - 1)
    cy = np.clip(coords[..., 1], 0.0, H - 1)
    x0 = np.minimum(np.floor(cx), max(W - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(cy), max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = cx - x0
    fy = cy - y0
    inside_x = (coords[..., 0] >= 0) & (coords[..., 0] <= W - 1)
    inside_y = (coords[..., 1] >= 0) & (coords[..., 1] <= H - 1)
    return x0, x1, y0, y1, fx, fy, inside_x, inside_y


def bilinear_sample(field, coords) -> Var:
    """Sample ``field[B, H, W, C]`` at continuous ``coords[B, ..., 2]`` (x, y).

    Coordinates outside the image are clamped to the border (replicate
    padding); the clamped direction then has zero gradient.
    """
    field, coords = as_var(field), as_var(coords)
    B, H, W, C = field.shape
    if coords.shape[0] != B or coords.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: coords shape {coords.shape} incompatible with field {field.shape}")
    x0, x1, y0, y1, fx, fy, in_x, in_y = _bilinear_setup(H, W, coords.data)
    mid = coords.shape[1:-1]
    bidx = np.arange(B).reshape((B,) + (1,) * len(mid)) * (H * W)
    flat = field.data.reshape(B * H * W, C)
    i00 = bidx + y0 * W + x0
    i01 = bidx + y0 * W + x1
    i10 = bidx + y1 * W + x0
    i11 = bidx + y1 * W + x1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    wx, wy = fx[..., None], fy[..., None]
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    # weighted form: integer coordinates give one weight of exactly 1
    out = f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11

    def backward(gs):
        g = gs[0]
        gfield = None
        if field.tracked:
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate([(g * w).reshape(-1, C) for w in (w00, w01, w10, w11)])
            full = idx[:, None] * C + np.arange(C)
            gfield = np.bincount(full.ravel(), weights=vals.ravel(), minlength=B * H * W * C)
            gfield = gfield.reshape(field.shape).astype(field.data.dtype)
        gcoords = None
        if coords.tracked:
            dx = ((f01 - f00) * (1 - wy) + (f11 - f10) * wy) * g
            dy = ((f10 - f00) * (1 - wx) + (f11 - f01) * wx) * g
            gcoords = np.stack([dx.sum(-1) * in_x, dy.sum(-1) * in_y], axis=-1).astype(coords.data.dtype)
        return gfield, gcoords

    return _emit("bilinear_sample", (field, coords), out, backward)


def upsample_nearest(x, factor: int) -> Var:
    x = as_var(x)
    B, H, W, C = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(gs):
        g = gs[0].reshape(B, H, factor, W, factor, C)
        return (g.sum(axis=(2, 4)),)

    return _emit("upsample_nearest", (x,), y, backward)


def identity_grid(H: int, W: int, dtype=None) -> np.ndarray:
    """``[H, W, 2]`` array whose entry at row y, column x is ``(x, y)``."""
    dtype = dtype or get_dtype()
    ys, xs = np.meshgrid(np.arange(H, dtype=dtype), np.arange(W, dtype=dtype), indexing="ij")
    return np.stack([xs, ys], axis=-1)
