"""Quick invariant suite run by ``matchattn selftest``."""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .attention import AttnConfig, init_layer_weights, match_attention, window_attention
from .autograd import Var, precision
from .bilinear_softmax import bilinear_softmax_forward, bilinear_softmax_reference
from .decoder import MatchDecoder, consistency_check, preset
from .flops import attention_flops
from .gradcheck import check_gradients
from .io import read_flo, read_pfm, write_flo, write_pfm
from .metrics import compute_metrics
from .synthetic import gen_scene


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _fused_vs_reference(rng):
    worst = 0.0
    for w in (1, 3, 5):
        sim = rng.normal(0, 3, size=(200, (w + 1) ** 2))
        frac = rng.uniform(0, 1, size=(200, 2))
        a = bilinear_softmax_forward(sim, frac, w).weights
        b = bilinear_softmax_reference(sim, frac, w).weights
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < 1e-12, f"max abs diff {worst:.2e}"


def _weights_sum_to_one(rng):
    Q, K, V = (rng.normal(size=(2, 7, 9, 2, 4)) for _ in range(3))
    R = rng.normal(0, 6, size=(2, 7, 9, 2))
    _, alpha, _ = window_attention(Q, K, V, R, 3)
    dev = float(np.abs(alpha.data.sum(-1) - 1).max())
    return dev < 1e-6, f"max deviation {dev:.2e}"


def _layer_gradients(rng):
    cfg = AttnConfig(w=3, heads=2, c_k=2, c_v=2, inject_weights=True, gated=True)
    wts = init_layer_weights(cfg, 5, 3, rng)
    F = Var(rng.normal(size=(2, 5, 5, 3)), name="F")
    R = Var(rng.uniform(-2.4, 2.4, size=(2, 5, 5, 2)), name="R")
    t = rng.normal(size=(2, 5, 5, 5))

    def loss():
        Fh = ops.concat([F, ops.mul(R, wts.beta)])
        res = match_attention(Fh, ops.flip_batch(Fh), R, cfg, wts)
        return ops.sum_(ops.mul(ops.concat([res.F, res.R_delta]), t))

    reps = check_gradients(loss, [F, R, *wts.named().values()], max_entries=30, floor=1e-4)
    worst = max(r.max_rel for r in reps)
    return worst < 1e-4, f"worst relative error {worst:.2e}"


def _flops(rng):
    b = attention_flops(1, 1, 1, 1, 1, 3)
    ok = (b.qk_flops, b.agg_flops, b.bsm_flops) == (32, 32, 160)
    ok &= attention_flops(8, 8, 4, 32, 32, 3).qk_flops == 262_144
    return ok, f"qk={b.qk_flops} agg={b.agg_flops} bsm={b.bsm_flops}"


def _io_round_trip(rng):
    with tempfile.TemporaryDirectory() as d:
        a = rng.normal(size=(7, 5)).astype(np.float32)
        f = rng.normal(size=(4, 6, 2)).astype(np.float32)
        write_pfm(Path(d) / "a.pfm", a)
        write_flo(Path(d) / "f.flo", f)
        ok = np.array_equal(read_pfm(Path(d) / "a.pfm"), a) and np.array_equal(read_flo(Path(d) / "f.flo"), f)
    return ok, "bitwise" if ok else "mismatch"


def _scene_consistency(rng):
    worst = 0.0
    for kind in ("constant_shift", "two_layer", "smooth_warp"):
        sc = gen_scene(kind, 32, 64, seed=1)
        _, _, res = consistency_check(sc.R0, sc.R1, 1.0)
        worst = max(worst, float(res[0][sc.noc0].max()), float(res[1][sc.noc1].max()))
    return worst < 1e-9, f"max noc residual {worst:.2e}"


def _metrics_zero(rng):
    gt = rng.normal(size=(6, 6, 2))
    r = compute_metrics(gt, gt, noc=np.ones((6, 6), bool))
    return r.all.epe == 0 and r.noc.d1 == 0, f"epe={r.all.epe}"


def _decoder_swap(rng):
    model = MatchDecoder(preset("desk", "flow"), seed=3)
    a, b = rng.random((32, 64, 3)), rng.random((32, 64, 3))
    o1, o2 = model(a, b), model(b, a)
    dev = float(np.abs(o1.R.data - o2.R.data[::-1]).max())
    return dev < 1e-9, f"swap deviation {dev:.2e}"


CHECKS: dict[str, Callable] = {
    "bilinear_softmax_fused_vs_reference": _fused_vs_reference,
    "attention_weights_sum_to_one": _weights_sum_to_one,
    "attention_layer_gradients": _layer_gradients,
    "flops_formulas": _flops,
    "io_round_trip": _io_round_trip,
    "synthetic_gt_consistency": _scene_consistency,
    "metrics_zero_error": _metrics_zero,
    "decoder_view_swap": _decoder_swap,
}


def run_selftest(names=None, seed: int = 0) -> list[CheckResult]:
    out = []
    with precision("f64"):
        for name, fn in CHECKS.items():
            if names and name not in names:
                continue
            t0 = time.perf_counter()
            try:
                ok, detail = fn(np.random.default_rng(seed))
            except Exception as exc:  # a crashing check is a failed check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
