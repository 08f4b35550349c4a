"""Slow, obviously-correct reference implementations used as test oracles."""

from collections import defaultdict


def iou_ref(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def priority_key(det):
    return (-det.score, tuple(det.box))


def nms_ref(dets, thr):
    kept = []
    for d in sorted(dets, key=priority_key):
        if all(iou_ref(d.box, k.box) <= thr for k in kept):
            kept.append(d)
    return kept


def match_ref(dets, gts, thr):
    """Flags aligned with ``dets`` under the greedy highest-IoU rule."""
    flags = [False] * len(dets)
    used = set()
    for i in sorted(range(len(dets)), key=lambda i: priority_key(dets[i])):
        d = dets[i]
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if j in used or g.image_id != d.image_id or g.class_id != d.class_id:
                continue
            v = iou_ref(d.box, g.box)
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            used.add(best_j)
            flags[i] = True
    return flags


def ap_ref(flags, scores, n_gt):
    """All-point interpolated AP, integrated rank by rank."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = fp = 0
    points = []
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def recall_ref(dets, gts, k, thr):
    per_image = defaultdict(list)
    for d in dets:
        per_image[d.image_id].append(d)
    kept = []
    for img in per_image:
        kept.extend(sorted(per_image[img], key=priority_key)[:k])
    return sum(match_ref(kept, gts, thr)) / len(gts)
