"""Object keypoint similarity and AP/AR evaluation over an OKS threshold grid.

Annotations use a strict subset of the COCO keypoint schema: images carry
{id, file_name, width, height} and annotations carry {image_id, area,
keypoints: flat [x, y, v] * K}, so real COCO files parse for the fields used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import AnnotationError

# canonical 17 COCO keypoint constants
COCO_SIGMAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089])

COCO_JOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle"]

# (left, right) index pairs, used by horizontal flip augmentation
COCO_FLIP_PAIRS = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)]


@dataclass
class KeypointAnnotation:
    image_id: int
    width: int
    height: int
    area: float
    keypoints: np.ndarray   # [K, 3] of (x, y, v)
    file_name: str = ""

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.area <= 0:
            raise AnnotationError(f"annotation area must be positive, got {self.area}")
        vis = self.keypoints[:, 2] > 0
        xs, ys = self.keypoints[vis, 0], self.keypoints[vis, 1]
        if vis.any() and (xs.min() < 0 or xs.max() >= self.width
                          or ys.min() < 0 or ys.max() >= self.height):
            raise AnnotationError("visible keypoint outside the image frame")

    @property
    def num_visible(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())


@dataclass
class OKSParams:
    sigmas: np.ndarray = field(default_factory=lambda: COCO_SIGMAS.copy())
    thresholds: np.ndarray = field(
        default_factory=lambda: np.round(np.arange(0.50, 0.951, 0.05), 2))

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if (self.sigmas <= 0).any():
            raise AnnotationError("per-keypoint constants must be positive")
        if (np.diff(self.thresholds) <= 0).any():
            raise AnnotationError("thresholds must be strictly increasing")


def oks(pred_xy: np.ndarray, ann: KeypointAnnotation, params: OKSParams | None = None) -> float:
    """Mean over visible joints of exp(-d^2 / (2 * area * kappa^2))."""
    params = params or OKSParams()
    kp = ann.keypoints
    vis = kp[:, 2] > 0
    if not vis.any():
        raise AnnotationError("OKS undefined: annotation has no visible joints")
    pred_xy = np.asarray(pred_xy, dtype=np.float64)[:, :2]
    d2 = ((pred_xy[vis] - kp[vis, :2]) ** 2).sum(axis=1)
    kappa2 = params.sigmas[vis] ** 2
    e = np.exp(-d2 / (2.0 * ann.area * kappa2))
    return float(e.mean())


@dataclass
class PredictedInstance:
    image_id: int
    keypoints: np.ndarray   # [K, 2] or [K, 3]; third column ignored here
    score: float


def _greedy_match(ious: np.ndarray, threshold: float) -> List[int]:
    """Row order = predictions sorted by score. Returns per-pred matched gt or -1.

    Each prediction claims the unmatched GT with the highest OKS >= threshold;
    OKS ties break toward the lower GT index.
    """
    n_pred, n_gt = ious.shape
    taken = [False] * n_gt
    matches = [-1] * n_pred
    for p in range(n_pred):
        best, best_oks = -1, -1.0
        for g in range(n_gt):
            if taken[g]:
                continue
            if ious[p, g] >= threshold and ious[p, g] > best_oks:
                best, best_oks = g, ious[p, g]
        if best >= 0:
            taken[best] = True
            matches[p] = best
    return matches


def average_precision(predictions: Sequence[PredictedInstance],
                      gts: Sequence[KeypointAnnotation],
                      params: OKSParams | None = None) -> Dict[str, float]:
    """Greedy per-image matching at each threshold, 101-point interpolated AP.

    Returns ap (mean over the grid), ap50, ap75, and ar (mean max recall).
    """
    params = params or OKSParams()
    gt_by_image: Dict[int, List[KeypointAnnotation]] = {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g)
    pred_by_image: Dict[int, List[Tuple[int, PredictedInstance]]] = {}
    for i, p in enumerate(predictions):
        pred_by_image.setdefault(p.image_id, []).append((i, p))

    total_gt = len(gts)
    n_thr = len(params.thresholds)
    if total_gt == 0 or len(predictions) == 0:
        zero = {f"ap{int(t * 100)}": 0.0 for t in params.thresholds}
        zero.update(ap=0.0, ar=0.0)
        return zero

    # per image: score-sorted predictions and their OKS rows against local GTs
    entries = []   # (score, image_id, original index, per-threshold tp flags)
    matched_per_thr = np.zeros(n_thr)
    for img_id, preds in pred_by_image.items():
        order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, preds[i][0]))
        local_gts = gt_by_image.get(img_id, [])
        ious = np.zeros((len(preds), len(local_gts)))
        for row, i in enumerate(order):
            for col, g in enumerate(local_gts):
                ious[row, col] = oks(preds[i][1].keypoints, g, params)
        tp = np.zeros((len(preds), n_thr), dtype=bool)
        for t_idx, thr in enumerate(params.thresholds):
            matches = _greedy_match(ious, thr)
            for row, m in enumerate(matches):
                if m >= 0:
                    tp[row, t_idx] = True
                    matched_per_thr[t_idx] += 1
        for row, i in enumerate(order):
            entries.append((preds[i][1].score, img_id, preds[i][0], tp[row]))

    # global PR curve per threshold over score-ranked predictions
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    rec_grid = np.linspace(0.0, 1.0, 101)
    ap_per_thr = np.zeros(n_thr)
    for t_idx in range(n_thr):
        tps = np.array([e[3][t_idx] for e in entries], dtype=np.float64)
        cum_tp = np.cumsum(tps)
        ranks = np.arange(1, len(entries) + 1, dtype=np.float64)
        precision = cum_tp / ranks
        recall = cum_tp / total_gt
        # precision envelope: max precision at recall >= r
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        idx = np.searchsorted(recall, rec_grid, side="left")
        p_at = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
        ap_per_thr[t_idx] = float(np.mean(p_at))

    recalls = matched_per_thr / total_gt
    result = {"ap": float(np.mean(ap_per_thr)), "ar": float(np.mean(recalls))}
    for t_idx, thr in enumerate(params.thresholds):
        result[f"ap{int(round(thr * 100))}"] = float(ap_per_thr[t_idx])
    return result


# ---------------------------------------------------------------------------
# annotation file I/O (COCO keypoint subset)


def save_annotations(path: Path | str, anns: Sequence[KeypointAnnotation],
                     meta: dict | None = None):
    images = [{"id": a.image_id, "file_name": a.file_name,
               "width": a.width, "height": a.height} for a in anns]
    annotations = [{"image_id": a.image_id, "area": a.area,
                    "keypoints": [round(float(v), 4) for v in a.keypoints.reshape(-1)],
                    "num_keypoints": a.num_visible} for a in anns]
    doc = {"images": images, "annotations": annotations}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=1))


def load_annotations(path: Path | str) -> Tuple[List[KeypointAnnotation], dict]:
    doc = json.loads(Path(path).read_text())
    images = {img["id"]: img for img in doc["images"]}
    anns = []
    for a in doc["annotations"]:
        img = images[a["image_id"]]
        anns.append(KeypointAnnotation(
            image_id=a["image_id"], width=img["width"], height=img["height"],
            area=float(a["area"]), keypoints=np.asarray(a["keypoints"], dtype=np.float64),
            file_name=img.get("file_name", "")))
    return anns, doc.get("meta", {})
