"""AdamW with a one-cycle schedule, the toy overfit loop and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tape, Var
from .decoder import DecoderConfig, MatchDecoder
from .io import load_tensors, save_tensors
from .losses import loss_total
from .metrics import compute_metrics
from .synthetic import SyntheticScene

TRACE_HEADER = ("step", "loss", "l_init", "l_self", "l_cross", "epe")
SEED_ENV = "MATCHATTN_SEED"


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step, self.loss = step, loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    steps: int = 2000
    warmup: float = 0.05
    final_div: float = 25.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    batch: int = 1
    max_loss: float = 1e6

    def __post_init__(self):
        if self.lr <= 0 and self.steps > 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else seed


def one_cycle_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup`` fraction to ``lr``, then
    cosine decay to ``lr / final_div`` at the last step."""
    n = cfg.steps
    n_warm = max(1, int(round(cfg.warmup * n)))
    if step < n_warm:
        return cfg.lr * (step + 1) / n_warm
    lo = cfg.lr / cfg.final_div
    span = max(1, n - 1 - n_warm)
    t = min(1.0, (step - n_warm) / span)
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * t))


class ParamStore:
    """Named parameters with AdamW moments."""

    def __init__(self, params: dict[str, Var]):
        self.params = params
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.step = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}


def adamw_step(store: ParamStore, cfg: TrainConfig, step_index: int, lr: float | None = None) -> float:
    """One decoupled-weight-decay Adam update; returns the learning rate used."""
    lr = one_cycle_lr(step_index, cfg) if lr is None else lr
    store.step += 1
    t = store.step
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    for k, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = store.m[k]
        v = store.v[k]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data *= 1 - lr * cfg.weight_decay
        p.data -= (lr * update).astype(p.data.dtype)
    return lr


def checkpoint_tensors(model: MatchDecoder) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in model.params.items()}


def save_checkpoint(directory, model: MatchDecoder, extra: dict | None = None) -> None:
    meta = {"decoder": dataclasses.asdict(model.cfg), **(extra or {})}
    save_tensors(directory, checkpoint_tensors(model), meta)


def load_checkpoint(directory) -> MatchDecoder:
    tensors, meta = load_tensors(directory)
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["decoder"].items()}
    model = MatchDecoder(DecoderConfig(**d), seed=0)
    missing = set(model.params) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
    for k, p in model.params.items():
        if tensors[k].shape != p.data.shape:
            raise ValueError(f"{k}: checkpoint shape {tensors[k].shape} != model {p.data.shape}")
        p.data = tensors[k].astype(p.data.dtype)
    return model


def epe_noc(model_out, scene: SyntheticScene) -> float:
    pred = model_out.R.data[0]
    return compute_metrics(pred, scene.R0, noc=scene.noc0).noc.epe


def train_step(model: MatchDecoder, store: ParamStore, scene: SyntheticScene, cfg: TrainConfig, step: int):
    store.zero_grad()
    with Tape() as tape:
        out = model(scene.I0, scene.I1)
        rep = loss_total(out, scene.R0, model.cfg)
    loss = float(rep.total.data)
    if not math.isfinite(loss) or loss > cfg.max_loss:
        raise DivergenceError(step, loss)
    tape.backward(rep.total)
    adamw_step(store, cfg, step)
    return out, rep


def train_toy(
    dataset: Sequence[SyntheticScene],
    cfg: TrainConfig,
    dcfg: DecoderConfig,
    trace_path=None,
    model: MatchDecoder | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> tuple[MatchDecoder, list[dict]]:
    """Overfit ``dataset`` (cycled in order). Returns the model and the
    per-step trace; the trace is also written as CSV when a path is given.
    The EPE column is measured on the forward pass of that step."""
    if not dataset:
        raise ValueError("dataset is empty")
    model = model or MatchDecoder(dcfg, seed=resolve_seed(cfg.seed))
    store = ParamStore(model.params)
    trace: list[dict] = []
    fh = writer = None
    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
    try:
        for step in range(cfg.steps):
            scene = dataset[step % len(dataset)]
            try:
                out, rep = train_step(model, store, scene, cfg, step)
            except NonFiniteError as exc:
                raise DivergenceError(step, float("nan")) from exc
            vals = rep.as_floats()
            row = {"step": step, "loss": vals["total"], "l_init": vals["l_init"], "l_self": vals["l_self"],
                   "l_cross": vals["l_cross"], "epe": epe_noc(out, scene)}
            trace.append(row)
            if writer is not None:
                writer.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_HEADER[1:]])
            if callback is not None:
                callback(step, row)
    finally:
        if fh is not None:
            fh.close()
    return model, trace
