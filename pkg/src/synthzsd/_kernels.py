"""Box kernels: pairwise IoU, greedy NMS and greedy detection matching.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorised pure-numpy version.  Both evaluate IoU with the same expression so
their outputs agree bitwise.  ``SYNTHZSD_NUMBA=0`` in the environment (read at
import) forces the numpy path; it is also used when numba is missing.
"""

import logging
import os

import numpy as np

log = logging.getLogger(__name__)


def _numba_requested():
    return os.environ.get("SYNTHZSD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# numba loops


@_njit
def _iou_pair(a0, a1, a2, a3, b0, b1, b2, b3):
    iw = min(a2, b2) - max(a0, b0)
    ih = min(a3, b3) - max(a1, b1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / ((a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter)


@_njit
def iou_matrix_jit(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _iou_pair(a[i, 0], a[i, 1], a[i, 2], a[i, 3], b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


@_njit
def nms_sorted_jit(boxes, threshold):
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    kept = np.empty(n, dtype=np.int64)
    nk = 0
    for i in range(n):
        ok = True
        for k in range(nk):
            j = kept[k]
            if _iou_pair(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                         boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3]) > threshold:
                ok = False
                break
        if ok:
            keep[i] = True
            kept[nk] = i
            nk += 1
    return keep


@_njit
def greedy_match_jit(dets, gts, threshold):
    nd = dets.shape[0]
    ng = gts.shape[0]
    tp = np.zeros(nd, dtype=np.bool_)
    match = np.full(nd, -1, dtype=np.int64)
    used = np.zeros(ng, dtype=np.bool_)
    for i in range(nd):
        best = -1.0
        bj = -1
        for j in range(ng):
            if used[j]:
                continue
            v = _iou_pair(dets[i, 0], dets[i, 1], dets[i, 2], dets[i, 3],
                          gts[j, 0], gts[j, 1], gts[j, 2], gts[j, 3])
            if v > best:
                best = v
                bj = j
        if bj >= 0 and best >= threshold:
            tp[i] = True
            match[i] = bj
            used[bj] = True
    return tp, match


# ---------------------------------------------------------------------------
# pure numpy


def iou_matrix_np(a, b):
    a = a[:, None, :]
    b = b[None, :, :]
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = iw * ih
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / union
    return np.where((iw <= 0) | (ih <= 0), 0.0, out)


def nms_sorted_np(boxes, threshold):
    n = len(boxes)
    keep = np.zeros(n, dtype=bool)
    alive = np.arange(n)
    while alive.size:
        i = alive[0]
        keep[i] = True
        rest = alive[1:]
        ov = iou_matrix_np(boxes[i:i + 1], boxes[rest])[0]
        alive = rest[ov <= threshold]
    return keep


def greedy_match_np(dets, gts, threshold):
    nd, ng = len(dets), len(gts)
    tp = np.zeros(nd, dtype=bool)
    match = np.full(nd, -1, dtype=np.int64)
    if nd == 0 or ng == 0:
        return tp, match
    ious = iou_matrix_np(dets, gts)
    used = np.zeros(ng, dtype=bool)
    for i in range(nd):
        row = np.where(used, -1.0, ious[i])
        j = int(np.argmax(row))
        if not used[j] and row[j] >= threshold:
            tp[i] = True
            match[i] = j
            used[j] = True
    return tp, match


# ---------------------------------------------------------------------------
# dispatch


def _f64(x, cols=4):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, cols))


def iou_matrix(a, b, use_numba=None):
    a, b = _f64(a), _f64(b)
    if USE_NUMBA if use_numba is None else use_numba:
        return iou_matrix_jit(a, b)
    return iou_matrix_np(a, b)


def nms_sorted(boxes, threshold, use_numba=None):
    """Keep-mask for boxes already in priority order."""
    boxes = _f64(boxes)
    if USE_NUMBA if use_numba is None else use_numba:
        return nms_sorted_jit(boxes, float(threshold))
    return nms_sorted_np(boxes, float(threshold))


def greedy_match(dets, gts, threshold, use_numba=None):
    """TP flags and matched gt index for score-sorted detections."""
    dets, gts = _f64(dets), _f64(gts)
    if USE_NUMBA if use_numba is None else use_numba:
        return greedy_match_jit(dets, gts, float(threshold))
    return greedy_match_np(dets, gts, float(threshold))
