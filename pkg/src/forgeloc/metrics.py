"""Pixel-level F1 and ROC-AUC scoring for predicted tamper maps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class DegenerateMaskError(ValueError):
    """Ground truth contains only one class, so ranking AUC is undefined."""


def _as_arrays(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, (gt > 0.5)


def pixel_f1(pred, gt, threshold: float = 0.5) -> float:
    """F1 of the thresholded prediction against a binary mask.

    Both-empty (no tampered pixels predicted or labeled) counts as perfect
    agreement and returns 1.0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0,1)")
    pred, gt = _as_arrays(pred, gt)
    hard = pred > threshold
    tp = int(np.count_nonzero(hard & gt))
    fp = int(np.count_nonzero(hard & ~gt))
    fn = int(np.count_nonzero(~hard & gt))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0 if not gt.any() and not hard.any() else 0.0
    return 2.0 * tp / denom


def pixel_auc(pred, gt) -> float:
    """Mann-Whitney ROC-AUC: P(random tampered pixel outranks a random
    authentic one), ties counted as 1/2. Computed via average ranks."""
    pred, gt = _as_arrays(pred, gt)
    pos = int(np.count_nonzero(gt))
    neg = gt.size - pos
    if pos == 0 or neg == 0:
        raise DegenerateMaskError("mask is all one class; AUC undefined")
    ranks = rankdata(pred.ravel(), method="average")
    rank_sum = float(ranks[gt.ravel()].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


@dataclass
class ScoreReport:
    """Per-image and aggregate localization scores.

    Aggregates are means of per-image values unless `pooled` was requested,
    in which case all pixels are scored as one population. Images whose
    mask is single-class are skipped for AUC (logged) but still scored
    for F1.
    """

    f1: float
    auc: float
    threshold: float
    aggregation: str
    per_image: list[dict] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "scores.jsonl", "w") as fh:
            for rec in self.per_image:
                fh.write(json.dumps(rec) + "\n")
        summary = {
            "f1": self.f1,
            "auc": self.auc,
            "threshold": self.threshold,
            "aggregation": self.aggregation,
            "images": len(self.per_image),
        }
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)


def score_images(ids, preds, gts, threshold: float = 0.5,
                 pooled: bool = False) -> ScoreReport:
    per_image = []
    aucs = []
    for img_id, pred, gt in zip(ids, preds, gts):
        f1 = pixel_f1(pred, gt, threshold)
        try:
            auc = pixel_auc(pred, gt)
            aucs.append(auc)
        except DegenerateMaskError:
            log.warning("image %s has a single-class mask; AUC skipped", img_id)
            auc = None
        per_image.append({"id": img_id, "f1": f1, "auc": auc})

    if pooled:
        all_pred = np.concatenate([np.asarray(p, dtype=np.float64).ravel()
                                   for p in preds])
        all_gt = np.concatenate([np.asarray(g).ravel() for g in gts])
        agg_f1 = pixel_f1(all_pred, all_gt, threshold)
        agg_auc = pixel_auc(all_pred, all_gt)
        aggregation = "pooled"
    else:
        agg_f1 = float(np.mean([r["f1"] for r in per_image])) if per_image else 0.0
        agg_auc = float(np.mean(aucs)) if aucs else float("nan")
        aggregation = "mean-per-image"
    return ScoreReport(f1=agg_f1, auc=agg_auc, threshold=threshold,
                       aggregation=aggregation, per_image=per_image)
