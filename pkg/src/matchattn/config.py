"""INI-style run configuration.

Example::

    [model]
    task = stereo
    preset = desk

    [loss]
    A = 1.0
    eps = 0.01
    gamma_loss = 0.9

    [train]
    lr = 5e-4
    weight_decay = 0.05
    steps = 2000
    seed = 0

Unknown sections or keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import configparser
from dataclasses import fields, replace

from .decoder import DecoderConfig, preset
from .training import TrainConfig, resolve_seed

_LOSS_KEYS = {"A": float, "eps": float, "gamma_loss": float}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_CASTS = {"float": float, "int": int}


def parse_config(text: str) -> tuple[DecoderConfig, TrainConfig]:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case ("A")
    cp.read_string(text)
    extra = set(cp.sections()) - {"model", "loss", "train"}
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    model = dict(cp["model"]) if cp.has_section("model") else {}
    bad = set(model) - {"task", "preset"}
    if bad:
        raise ValueError(f"unknown [model] keys: {sorted(bad)}")
    dcfg = preset(model.get("preset", "desk"), task=model.get("task", "stereo"))
    if cp.has_section("loss"):
        over = {}
        for k, v in cp["loss"].items():
            if k not in _LOSS_KEYS:
                raise ValueError(f"unknown [loss] key {k!r}")
            over[k] = _LOSS_KEYS[k](v)
        dcfg = replace(dcfg, **over)
    tcfg = TrainConfig()
    if cp.has_section("train"):
        over = {}
        for k, v in cp["train"].items():
            if k not in _TRAIN_KEYS:
                raise ValueError(f"unknown [train] key {k!r}")
            over[k] = _CASTS[_TRAIN_KEYS[k]](v)
        tcfg = replace(tcfg, **over)
    return dcfg, replace(tcfg, seed=resolve_seed(tcfg.seed))


def load_config(path) -> tuple[DecoderConfig, TrainConfig]:
    with open(path) as fh:
        return parse_config(fh.read())
