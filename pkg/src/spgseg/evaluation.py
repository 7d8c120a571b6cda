"""Point-level metrics, the Perfect partition bound, and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import data
from .models import ModelConfig, icrf
from .spg import FeatureStats
from .pipeline import attach_stats
from . import train as tr

log = logging.getLogger(__name__)

VARIANTS = ("Best", "Unary", "iCRF", "CRF-ECC", "GRU13", "NoInputGate", "NoConcat", "NoEdgeFeat",
            "ECC-VV", "ECC-MV")


def confusion_matrix(pred, gt, K) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction; gt < 0 is skipped."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth lengths differ: {pred.shape} vs {gt.shape}")
    keep = gt >= 0
    p, g = pred[keep], gt[keep]
    if len(g) and (p.min() < 0 or p.max() >= K or g.max() >= K):
        raise ValueError("label outside 0..K-1")
    return np.bincount(g * K + p, minlength=K * K).reshape(K, K)


@dataclass
class Metrics:
    oa: float
    macc: float
    iou: np.ndarray  # nan for classes absent from both gt and prediction
    miou: float
    confusion: np.ndarray

    def row(self) -> dict:
        d = {"OA": self.oa, "mAcc": self.macc, "mIoU": self.miou}
        for k, v in enumerate(self.iou):
            d[f"IoU_{k}"] = v
        return d


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    total = cm.sum()
    if total == 0:
        raise ValueError("no labeled points to evaluate")
    tp = np.diag(cm).astype(np.float64)
    gt_n = cm.sum(1).astype(np.float64)
    pr_n = cm.sum(0).astype(np.float64)
    union = gt_n + pr_n - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(gt_n > 0, tp / gt_n, np.nan)
    present = union > 0
    return Metrics(float(tp.sum() / total), float(np.nanmean(recall)), iou, float(iou[present].mean()), cm)


def metrics(pred, gt, K) -> Metrics:
    return metrics_from_confusion(confusion_matrix(pred, gt, K))


def perfect_bound(component_of, gt, K) -> Metrics:
    """Metrics when every superpoint gets its majority ground-truth label."""
    comp = np.asarray(component_of, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    maj = data.majority_labels(comp, gt, int(comp.max()) + 1, K)
    pred = maj[comp]
    # superpoints without any labeled point predict class 0; they only hold unlabeled points
    return metrics(np.maximum(pred, 0), gt, K)


def scene_perfect(scene, gt, K) -> Metrics:
    """Perfect bound on the original points of a pipeline scene."""
    point_comp = scene.component_of[scene.vmap.voxel_of]
    return perfect_bound(point_comp, gt, K)


# -- report formatting -----------------------------------------------------
def metrics_table(rows: dict, class_names=data.CLASS_NAMES) -> str:
    """Human-readable table: one row per method with OA, mAcc, mIoU and per-class IoU (in %)."""
    names = list(class_names)
    head = ["method", "OA", "mAcc", "mIoU"] + names
    lines = []
    widths = [max(12, max((len(k) for k in rows), default=0))] + [max(6, len(h)) for h in head[1:]]

    def fmt(v):
        return "-" if v is None or np.isnan(v) else f"{100 * v:.1f}"
    lines.append("  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths))))
    for name, m in rows.items():
        vals = [name, fmt(m.oa), fmt(m.macc), fmt(m.miou)] + [fmt(v) for v in m.iou]
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(vals, widths))))
    return "\n".join(lines)


def metrics_csv(rows: dict, class_names=data.CLASS_NAMES) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "OA", "mAcc", "mIoU"] + [f"IoU_{c}" for c in class_names])
    for name, m in rows.items():
        w.writerow([name, f"{m.oa:.6f}", f"{m.macc:.6f}", f"{m.miou:.6f}"] +
                   ["" if np.isnan(v) else f"{v:.6f}" for v in m.iou])
    return buf.getvalue()


# -- ablations -------------------------------------------------------------
def variant_config(variant: str, base: ModelConfig) -> ModelConfig:
    """Model configuration of a named ablation, derived from ``base`` (the Best setting)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant == "Best":
        return base
    if variant in ("Unary", "iCRF"):
        return replace(base, kind="unary")
    if variant == "CRF-ECC":
        return replace(base, kind="crf-ecc")
    if variant == "GRU13":
        return replace(base, d_z=13)
    if variant == "NoInputGate":
        return replace(base, input_gate=False)
    if variant == "NoConcat":
        return replace(base, concat=False)
    if variant == "NoEdgeFeat":
        return replace(base, edge_features=False)
    if variant == "ECC-VV":
        return replace(base, ecc="vv")
    return replace(base, ecc="mv")


ICRF_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


def fit_icrf_sigma(model, scenes, runs=1, seed=0, grid=ICRF_GRID):
    """Potts strength maximizing superpoint accuracy on the training scenes."""
    cache = [(tr.superpoint_logits(model, s, runs, seed), s) for s in scenes]
    best, best_acc = 0.0, -1.0
    for sigma in grid:
        hit = tot = 0
        for U, s in cache:
            lab = icrf(U, s.graph.edges, sigma)
            sp = s.graph.superpoints
            keep = sp.labels >= 0
            hit += int((sp.counts[keep] * (lab[keep] == sp.labels[keep])).sum())
            tot += int(sp.counts[keep].sum())
        acc = hit / max(tot, 1)
        if acc > best_acc:
            best, best_acc = sigma, acc
    return best


def ablation_run(variant, train_scenes, test_scenes, test_gt, base: ModelConfig, train_cfg: tr.TrainConfig,
                 runs=10, seed=0, K=None):
    """Train ``variant`` on ``train_scenes`` and evaluate on the original points of ``test_scenes``.

    Feature statistics are fit on the training scenes and reused for the test scenes.
    Returns (Metrics, model).
    """
    cfg = variant_config(variant, base)
    K = K or cfg.n_classes
    stats = FeatureStats.fit([s.graph for s in train_scenes])
    attach_stats(train_scenes, stats)
    attach_stats(test_scenes, stats)
    model, _ = tr.train_loop(train_scenes, cfg, replace(train_cfg, seed=seed))
    post = None
    if variant == "iCRF":
        sigma = fit_icrf_sigma(model, train_scenes, seed=seed)
        log.info("iCRF: sigma_t = %g", sigma)
        post = lambda U, s: icrf(U, s.graph.edges, sigma)  # noqa: E731
    preds = [tr.predict(s, model, runs, seed, post)[0] for s in test_scenes]
    m = metrics(np.concatenate(preds), np.concatenate(test_gt), K)
    return m, model


def ablation_table(variants, train_scenes, test_scenes, test_gt, base, train_cfg, runs=10, seeds=(0,)):
    """Mean metrics over ``seeds`` for each variant, plus the Perfect bound."""
    out = {}
    K = base.n_classes
    for v in variants:
        cms = [ablation_run(v, train_scenes, test_scenes, test_gt, base, train_cfg, runs, s)[0].confusion
               for s in seeds]
        # pooled confusion over seeds
        out[v] = metrics_from_confusion(np.sum(cms, axis=0))
    cm = sum(scene_perfect(s, g, K).confusion for s, g in zip(test_scenes, test_gt))
    out["Perfect"] = metrics_from_confusion(cm)
    return out
