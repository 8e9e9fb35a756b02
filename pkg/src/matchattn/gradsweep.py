"""Finite-difference sweeps over the differentiable building blocks."""
from __future__ import annotations

import numpy as np

from . import ops
from .attention import AttnConfig, init_layer_weights, match_attention
from .autograd import Var, precision
from .bilinear_softmax import bilinear_softmax
from .decoder import MatchDecoder, preset
from .gradcheck import GradReport, check_gradients
from .losses import loss_total
from .synthetic import gen_scene


def sweep_bilinear_softmax(rng, max_entries=None) -> list[GradReport]:
    out = []
    for w in (1, 3, 5):
        sim = Var(rng.normal(0, 2, size=(6, (w + 1) ** 2)), name=f"sim_w{w}")
        frac = Var(rng.uniform(0.05, 0.95, size=(6, 2)), name=f"frac_w{w}")
        t = rng.normal(size=(6, (w + 1) ** 2))
        loss = lambda: ops.sum_(ops.mul(bilinear_softmax(sim, frac, w), t))
        out += check_gradients(loss, [sim, frac], floor=1e-4, max_entries=max_entries)
    return out


def sweep_attention_layer(rng, max_entries=None) -> list[GradReport]:
    cfg = AttnConfig(w=3, heads=2, c_k=3, c_v=3, inject_weights=True, gated=True)
    c = 4
    wts = init_layer_weights(cfg, c + 2, c, rng)
    F = Var(rng.normal(size=(2, 8, 8, c)), name="F")
    R = Var(rng.uniform(-2.5, 2.5, size=(2, 8, 8, 2)), name="R")
    t = rng.normal(size=(2, 8, 8, c + 2))

    def loss():
        Fh = ops.concat([F, ops.mul(R, wts.beta)])
        res = match_attention(Fh, ops.flip_batch(Fh), R, cfg, wts)
        return ops.sum_(ops.mul(ops.concat([res.F, res.R_delta]), t))

    named = wts.named()
    for k, v in named.items():
        v.name = k
    return check_gradients(loss, [*named.values(), F, R], floor=1e-4, max_entries=max_entries)


def sweep_decoder(rng, task: str = "stereo", max_entries=None, H: int = 32, W: int = 64) -> list[GradReport]:
    """Whole decoder loss against the stem convolution of the encoder."""
    model = MatchDecoder(preset("desk", task), seed=int(rng.integers(1 << 30)))
    kind = "constant_shift" if task == "stereo" else "smooth_warp"
    params = {"constant_shift": {"d": 3}, "smooth_warp": {"amp": 1.0, "tx": 0.5, "ty": 0}}[kind]
    sc = gen_scene(kind, H, W, params, seed=int(rng.integers(1 << 30)))
    targets = [model.params["enc.stem.k"], model.params["enc.stem.b"]]

    def loss():
        out = model(sc.I0, sc.I1)
        return loss_total(out, sc.R0, model.cfg).total

    return check_gradients(loss, targets, floor=1e-4, max_entries=max_entries)


def run_sweeps(seed: int = 0, max_entries: int | None = 40) -> list[tuple[str, GradReport]]:
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        out += [("bilinear_softmax", r) for r in sweep_bilinear_softmax(rng, max_entries)]
        out += [("attention_layer", r) for r in sweep_attention_layer(rng, max_entries)]
        out += [("decoder_stereo", r) for r in sweep_decoder(rng, "stereo", max_entries)]
    return out
