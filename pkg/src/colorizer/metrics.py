"""Raw-accuracy and class-balanced AuC over ab space, chroma statistics,
and bootstrap estimation for perceptual study results."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import GamutBins
from .rebalance import PriorWeights

AUC_MAX_THRESHOLD = 150


@dataclass
class AucCurve:
    """Cumulative accuracy over integer ab-distance thresholds 0..150.

    ``auc`` is the mean accuracy over the 151 thresholds, in percent.
    """

    accuracy: np.ndarray
    thresholds: np.ndarray = field(
        default_factory=lambda: np.arange(AUC_MAX_THRESHOLD + 1))

    @property
    def auc(self) -> float:
        return float(self.accuracy.mean() * 100.0)


def _flatten_ab(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected trailing ab axis of size 2, got {arr.shape}")
    return arr.reshape(-1, 2)


def auc_cmf(pred: np.ndarray, gt: np.ndarray,
            weights: np.ndarray | None = None) -> AucCurve:
    """Accuracy-vs-threshold curve of predicted chroma against ground truth.

    ``pred`` and ``gt`` are (..., 2) ab arrays of matching shape; optional
    per-pixel ``weights`` (same leading shape, nonnegative) turn each
    accuracy into a weighted fraction.
    """
    p = _flatten_ab(pred)
    g = _flatten_ab(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {np.shape(pred)} vs gt {np.shape(gt)}")
    if weights is None:
        w = np.ones(len(p), dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != len(p):
            raise ValueError("weights must have one entry per pixel")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    d = np.sqrt(((p - g) ** 2).sum(axis=1))
    thresholds = np.arange(AUC_MAX_THRESHOLD + 1, dtype=np.float64)
    acc = np.empty(len(thresholds))
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("weights sum to zero")
    for i, t in enumerate(thresholds):
        acc[i] = float(w @ (d <= t)) / wsum
    return AucCurve(accuracy=acc)


def rebalanced_auc(pred: np.ndarray, gt: np.ndarray,
                   priors: PriorWeights, bins: GamutBins) -> AucCurve:
    """Class-balanced AuC: pixels weighted by the lambda=0 rebalancing weight
    of the ground-truth pixel's nearest bin, renormalized to mean 1."""
    if priors.weights_lambda0 is None:
        raise ValueError(
            "priors carry no lambda=0 weights (smoothed prior has zeros); "
            "the class-balanced AuC is undefined for them")
    if priors.q != bins.q:
        raise ValueError(f"priors Q={priors.q} does not match bins Q={bins.q}")
    idx = bins.nearest(_flatten_ab(gt))
    w = priors.weights_lambda0[idx]
    w = w / w.mean()
    return auc_cmf(pred, gt, weights=w)


def mean_chroma(Y: np.ndarray) -> float:
    """Mean per-pixel chroma magnitude sqrt(a^2 + b^2) of an (..., 2) array."""
    ab = _flatten_ab(Y)
    return float(np.sqrt((ab ** 2).sum(axis=1)).mean())


def evaluation_report(entries, priors: PriorWeights | None = None,
                      bins: GamutBins | None = None,
                      header: dict | None = None) -> str:
    """Structured text report over (name, pred_ab, gt_ab) entries.

    One row per image (AuC, class-balanced AuC when priors carry lambda=0
    weights, mean chroma) followed by aggregate rows, both the mean over
    per-image scores and the pooled-pixel variant. Numbers are repr()'d so
    reruns are byte-identical.
    """
    can_rebalance = (priors is not None and bins is not None
                     and priors.weights_lambda0 is not None)

    def fmt(v):
        return "na" if v is None else repr(float(v))

    rows = []
    pooled_pred = []
    pooled_gt = []
    for name, pred_ab, gt_ab in entries:
        auc = auc_cmf(pred_ab, gt_ab).auc
        rebal = (rebalanced_auc(pred_ab, gt_ab, priors, bins).auc
                 if can_rebalance else None)
        rows.append((name, auc, rebal, mean_chroma(pred_ab)))
        pooled_pred.append(_flatten_ab(pred_ab))
        pooled_gt.append(_flatten_ab(gt_ab))
    if not rows:
        raise ValueError("no images to evaluate")
    pooled_pred = np.concatenate(pooled_pred)
    pooled_gt = np.concatenate(pooled_gt)

    lines = ["colorizer-eval 1"]
    for key, value in (header or {}).items():
        lines.append(f"{key} {value}")
    lines.append(f"images {len(rows)}")
    lines.append("columns image auc rebal_auc mean_chroma")
    for name, auc, rebal, chroma in rows:
        lines.append(f"{name} {fmt(auc)} {fmt(rebal)} {fmt(chroma)}")
    lines.append(f"aggregate mean_auc {fmt(np.mean([r[1] for r in rows]))}")
    lines.append(f"aggregate pooled_auc {fmt(auc_cmf(pooled_pred, pooled_gt).auc)}")
    lines.append(
        "aggregate mean_rebal_auc "
        + fmt(np.mean([r[2] for r in rows]) if can_rebalance else None))
    lines.append(
        "aggregate pooled_rebal_auc "
        + fmt(rebalanced_auc(pooled_pred, pooled_gt, priors, bins).auc
              if can_rebalance else None))
    lines.append(f"aggregate mean_chroma {fmt(np.mean([r[3] for r in rows]))}")
    return "\n".join(lines) + "\n"


def bootstrap_mean_se(outcomes, resamples: int = 10000,
                      seed: int = 0) -> tuple[float, float]:
    """Sample mean and bootstrap standard error of a list of outcomes.

    Resamples with replacement ``resamples`` times; the SE is the standard
    deviation of the resampled means. Deterministic per seed.
    """
    x = np.asarray(outcomes, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no outcomes")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    chunk = max(1, min(resamples, 2_000_000 // x.size))
    done = 0
    while done < resamples:
        n = min(chunk, resamples - done)
        idx = rng.integers(0, x.size, size=(n, x.size))
        means[done:done + n] = x[idx].mean(axis=1)
        done += n
    return float(x.mean()), float(means.std(ddof=1))


def bootstrap_compare(outcomes_a, outcomes_b, resamples: int = 10000,
                      seed: int = 0) -> float:
    """Two-sided bootstrap test on the difference of means.

    Resamples the difference under the pooled null (pool sorted first, so the
    result is symmetric under argument swap) and returns the add-one smoothed
    p-value for |observed difference|.
    """
    a = np.asarray(outcomes_a, dtype=np.float64)
    b = np.asarray(outcomes_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both outcome lists must be non-empty")
    observed = abs(a.mean() - b.mean())
    pooled = np.sort(np.concatenate([a, b]))
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, min(resamples, 2_000_000 // max(a.size, b.size)))
    done = 0
    while done < resamples:
        n = min(chunk, resamples - done)
        ma = pooled[rng.integers(0, pooled.size, size=(n, a.size))].mean(axis=1)
        mb = pooled[rng.integers(0, pooled.size, size=(n, b.size))].mean(axis=1)
        hits += int((np.abs(ma - mb) >= observed).sum())
        done += n
    return min(1.0, (hits + 1) / (resamples + 1))
