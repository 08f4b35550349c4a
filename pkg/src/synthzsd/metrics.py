"""Detection evaluation: greedy matching, AP/mAP, recall@K, harmonic mean."""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .detector import Box, _priority
from .errors import ContractError

REPORT_KEYS = ("mode", "iou_threshold", "per_class_ap", "map", "recall_at_k",
               "seen_map", "unseen_map", "harmonic_mean")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box
    class_id: int


def match_detections(dets, gts, iou_thr=0.5):
    """TP flags aligned with ``dets``.

    Within every (image, class) group detections are visited by descending
    score (ties by box coordinates); each claims the highest-IoU unmatched
    ground truth of its group when that IoU reaches ``iou_thr``.
    """
    flags = np.zeros(len(dets), dtype=bool)
    gt_groups = defaultdict(list)
    for g in gts:
        gt_groups[(g.image_id, g.class_id)].append(g.box)
    det_groups = defaultdict(list)
    for i, d in enumerate(dets):
        det_groups[(d.image_id, d.class_id)].append(i)
    for key, idx in det_groups.items():
        boxes = gt_groups.get(key)
        if not boxes:
            continue
        group = [dets[i] for i in idx]
        order = _priority(group)
        det_boxes = np.array([group[o].box for o in order], dtype=np.float64)
        tp, _ = _kernels.greedy_match(det_boxes, np.array(boxes, dtype=np.float64), iou_thr)
        for o, t in zip(order, tp):
            flags[idx[o]] = t
    return flags


def average_precision(flags, scores, n_gt, method="all"):
    """Area under the precision-recall curve of a score-ranked list.

    ``method="all"`` integrates the non-increasing precision envelope at every
    recall step; ``"11point"`` averages the envelope at recall 0, 0.1, ..., 1.
    Ties in score keep the given order.
    """
    if n_gt < 1:
        raise ContractError("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if flags.shape != scores.shape:
        raise ContractError("flags and scores differ in length")
    if flags.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    rec = tp / float(n_gt)
    prec = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    if method == "11point":
        return float(np.mean([prec[rec >= t].max() if np.any(rec >= t) else 0.0
                              for t in np.linspace(0.0, 1.0, 11)]))
    if method != "all":
        raise ContractError(f"unknown AP method {method!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def mean_ap(per_class_ap, class_set=None):
    keys = list(per_class_ap) if class_set is None else list(class_set)
    if not keys:
        raise ContractError("mAP over an empty class set")
    return float(sum(per_class_ap[k] for k in keys) / len(keys))


def recall_at_k(dets, gts, k=100, iou_thr=0.5):
    """Matched ground truths over all ground truths, top ``k`` detections per image."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if not gts:
        raise ContractError("recall needs at least one ground truth")
    per_image = defaultdict(list)
    for d in dets:
        per_image[d.image_id].append(d)
    kept = []
    for img in sorted(per_image):
        group = per_image[img]
        kept.extend(group[i] for i in _priority(group)[:k])
    return float(match_detections(kept, gts, iou_thr).sum() / len(gts))


def harmonic_mean(seen, unseen):
    if seen < 0 or unseen < 0:
        raise ContractError("harmonic mean of negative values")
    if seen == 0 or unseen == 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


@dataclass
class EvalReport:
    mode: str
    iou_threshold: float
    per_class_ap: dict
    map: float
    recall_at_k: float
    seen_map: Optional[float] = None
    unseen_map: Optional[float] = None
    harmonic_mean: Optional[float] = None

    def to_dict(self):
        d = {k: getattr(self, k) for k in REPORT_KEYS}
        d["per_class_ap"] = {str(c): self.per_class_ap[c] for c in sorted(self.per_class_ap)}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["per_class_ap"] = {int(k): v for k, v in d["per_class_ap"].items()}
        return cls(**d)


def build_report(dets, gts, semantics, mode="gzsd", k=100, iou_thr=0.5, ap_method="all"):
    if mode == "zsd":
        classes = set(semantics.unseen_ids)
    elif mode == "gzsd":
        classes = set(semantics.all_ids)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    dets = [d for d in dets if d.class_id in classes]
    gts = [g for g in gts if g.class_id in classes]
    flags = match_detections(dets, gts, iou_thr)
    n_gt = defaultdict(int)
    for g in gts:
        n_gt[g.class_id] += 1
    per_class = {}
    for c in sorted(n_gt):
        sel = [i for i, d in enumerate(dets) if d.class_id == c]
        per_class[c] = average_precision(flags[sel], np.array([dets[i].score for i in sel]), n_gt[c], ap_method) \
            if sel else 0.0
    report = EvalReport(mode, float(iou_thr), per_class, mean_ap(per_class), recall_at_k(dets, gts, k, iou_thr))
    unseen = [c for c in per_class if semantics.is_unseen(c)]
    if mode == "gzsd":
        seen = [c for c in per_class if semantics.is_seen(c)]
        report.seen_map = mean_ap(per_class, seen) if seen else 0.0
        report.unseen_map = mean_ap(per_class, unseen) if unseen else 0.0
        report.harmonic_mean = harmonic_mean(report.seen_map, report.unseen_map)
    else:
        report.unseen_map = report.map
    return report


def scene_ground_truths(scenes):
    return [GroundTruth(int(sc.image_id), Box(*map(float, b)), int(c))
            for sc in scenes for b, c in zip(sc.gt_boxes, sc.gt_classes)]
