"""Matching accuracy metrics over all valid and non-occluded pixels."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

BAD_THRESHOLDS = (0.5, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class MetricSet:
    epe: float
    bad_0_5: float
    bad_1: float
    bad_2: float
    bad_3: float
    d1: float
    avg_err: float
    n: int


@dataclass(frozen=True)
class MetricReport:
    all: MetricSet
    noc: MetricSet | None

    def rows(self):
        """``(region, metric, value)`` triples in a fixed order."""
        for region in ("all", "noc"):
            ms = getattr(self, region)
            if ms is None:
                continue
            for k, v in asdict(ms).items():
                yield region, k, v


def _metric_set(err: np.ndarray, err_l1: np.ndarray, gt_mag: np.ndarray) -> MetricSet:
    bad = [float((err > t).mean()) for t in BAD_THRESHOLDS]
    d1 = float(((err > 3.0) & (err > 0.05 * gt_mag)).mean())
    return MetricSet(float(err.mean()), *bad, d1, float(err_l1.mean()), int(err.size))


def compute_metrics(pred, gt, noc=None, valid=None) -> MetricReport:
    """Compare relative-position fields ``[H, W, 2]`` (or disparity maps ``[H, W]``).

    ``epe`` and the ``bad_*``/``d1`` thresholds use the Euclidean error;
    ``avg_err`` is the mean L1 error, which equals the absolute disparity
    error for horizontal-only fields.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    diff = pred - gt
    err = np.sqrt((diff**2).sum(-1))
    err_l1 = np.abs(diff).sum(-1)
    mag = np.sqrt((gt**2).sum(-1))
    valid = np.ones(err.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    rep_all = _metric_set(err[valid], err_l1[valid], mag[valid])
    rep_noc = None
    if noc is not None:
        sel = valid & np.asarray(noc, dtype=bool)
        if not sel.any():
            raise ValueError("no valid non-occluded pixels to evaluate")
        rep_noc = _metric_set(err[sel], err_l1[sel], mag[sel])
    return MetricReport(rep_all, rep_noc)
