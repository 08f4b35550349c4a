"""Inference over proposal scenes.

A detection is emitted for each proposal whose argmax over the active rows
is not background: ZSD activates background plus unseen rows, GZSD all rows.
Unseen-class boxes borrow the regression offsets of the seen class the head
scores highest for that proposal.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import ContractError, ParseError
from .models import classifier_logits
from .numerics import softmax

MODES = ("zsd", "gzsd")


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ContractError(f"degenerate box {tuple(self)}")
        return self

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    class_id: int
    score: float


@dataclass
class Proposal:
    image_id: int
    box: Box
    feature: np.ndarray
    offsets: Optional[np.ndarray] = None  # S x 4

    def __post_init__(self):
        self.box = Box(*self.box)
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 4)


def iou(a, b):
    a, b = Box(*a).validate(), Box(*b).validate()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _priority(dets):
    """Indices ordering detections by score desc, then box coordinates asc."""
    if not dets:
        return np.zeros(0, dtype=np.int64)
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms(dets, threshold=0.5):
    """Greedy NMS over detections of a single class and image."""
    if not dets:
        return []
    order = _priority(dets)
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    keep = _kernels.nms_sorted(boxes, threshold)
    return [dets[i] for i, k in zip(order, keep) if k]


def _argmax_seen(head, features):
    logits = classifier_logits(head, features, head.seen_rows)
    return np.argmax(logits, axis=1)


def assign_unseen_box(p, head):
    """Proposal box moved by the offsets of the highest-scoring seen class."""
    if p.offsets is None:
        return p.box
    if len(p.offsets) != head.n_seen:
        raise ContractError("proposal offsets do not cover every seen class")
    j = int(_argmax_seen(head, p.feature)[0])
    return Box(*(np.asarray(p.box) + p.offsets[j]))


def baseline_unseen_scores(p_s, semantics):
    """Unseen scores ``W_u^T W_s p_s``; accepts one vector or a batch of rows."""
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_s.shape[-1] != semantics.S:
        raise ContractError(f"expected {semantics.S} seen probabilities, got {p_s.shape[-1]}")
    return (p_s @ semantics.Ws.T) @ semantics.Wu


def _detect_scores(scene, scores, col_class, head, top_k, nms_thr, score_thr):
    """Shared tail of inference.

    ``scores`` is P x C with column 0 the background, ``col_class`` the class
    id for every column.
    """
    if len(scene.boxes) == 0:
        return []
    seen_ids = head.class_ids[head.seen_rows]
    fg = scores[:, 1:].max(axis=1) if scores.shape[1] > 1 else np.zeros(len(scores))
    order = np.lexsort((np.arange(len(fg)), -fg))[:top_k]
    cols = np.argmax(scores[order], axis=1)
    seen_arg = _argmax_seen(head, scene.features[order]) if scene.offsets is not None else None
    seen_col = {int(c): j for j, c in enumerate(seen_ids)}
    by_class = {}
    for n, (p, col) in enumerate(zip(order, cols)):
        if col == 0:
            continue
        s = float(scores[p, col])
        if s < score_thr:
            continue
        cid = int(col_class[col])
        box = scene.boxes[p]
        if scene.offsets is not None:
            j = seen_col.get(cid, seen_arg[n])
            box = box + scene.offsets[p, j]
        by_class.setdefault(cid, []).append(Detection(int(scene.image_id), Box(*map(float, box)), cid, s))
    out = []
    for cid in sorted(by_class):
        out.extend(nms(by_class[cid], nms_thr))
    order = _priority(out)
    return [out[i] for i in order]


def detect(scene, head, mode="gzsd", top_k=100, nms_thr=0.5, score_thr=0.05):
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    rows = head.rows_for(mode)
    if not np.all(head.initialized[rows]):
        raise ContractError("classifier head rows for this mode are not initialised")
    if len(scene.boxes) == 0:
        return []
    probs = softmax(classifier_logits(head, scene.features, rows))
    return _detect_scores(scene, probs, head.class_ids[rows], head, top_k, nms_thr, score_thr)


def detect_baseline(scene, head, semantics, mode="gzsd", top_k=100, nms_thr=0.5, score_thr=0.05):
    """Projection baseline: unseen scores come from the seen-only head's probabilities."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if len(scene.boxes) == 0:
        return []
    probs = softmax(classifier_logits(head, scene.features, head.rows_for("seen")))
    p_u = baseline_unseen_scores(probs[:, 1:], semantics)
    if mode == "zsd":
        scores = np.concatenate([probs[:, :1], p_u], axis=1)
        col_class = np.array((0,) + semantics.unseen_ids)
    else:
        scores = np.concatenate([probs, p_u], axis=1)
        col_class = np.array((0,) + semantics.seen_ids + semantics.unseen_ids)
    return _detect_scores(scene, scores, col_class, head, top_k, nms_thr, score_thr)


def detect_all(scenes, head, mode="gzsd", **kw):
    return [d for sc in scenes for d in detect(sc, head, mode, **kw)]


def write_detections(dets, path, overwrite=True):
    from .datakit import atomic_write_text

    lines = [
        f"{d.image_id}\t{d.class_id}\t{d.score:.6f}\t"
        + "\t".join(f"{v:.6f}" for v in d.box)
        for d in dets
    ]
    atomic_write_text(path, "".join(l + "\n" for l in lines), overwrite)


def read_detections(path):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ParseError(f"expected 7 fields, got {len(parts)}", path, n)
            try:
                out.append(Detection(int(parts[0]), Box(*map(float, parts[3:])), int(parts[1]), float(parts[2])))
            except ValueError as e:
                raise ParseError(str(e), path, n) from None
    return out
