"""Toy-world generation and file I/O.

The toy world ties class features linearly to semantics: a class ``c`` box
feature is ``relu(M w_c + eps)`` where ``M`` is a fixed ``D x d`` mixing map.
Unseen semantics are perturbed convex combinations of two seen semantics, so
the semantic-to-feature relation learnt on seen classes transfers.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError
from .models import BACKGROUND_ID, SemanticTable

SOURCES = ("real", "synthetic", "heldout")

POLICIES = {
    "distinct": (0.7, 0.3),
    "overlapping": (0.5, 0.49),
}


# ---------------------------------------------------------------------------
# atomic file helpers


def atomic_write_bytes(path, data, overwrite=True):
    path = os.fspath(path)
    if not overwrite and os.path.exists(path):
        raise FileExistsError(f"refusing to overwrite {path}")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text, overwrite=True):
    atomic_write_bytes(path, text.encode("utf-8"), overwrite)


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# feature sets


@dataclass
class FeatureSet:
    features: np.ndarray  # N x D
    labels: np.ndarray  # class ids, 0 = background
    iou: np.ndarray
    source: np.ndarray  # one of SOURCES per record

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError("features must be a 2-D array")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.iou = np.asarray(self.iou, dtype=np.float64).reshape(-1)
        self.source = np.asarray(self.source, dtype="<U9").reshape(-1)
        n = len(self.features)
        if not (len(self.labels) == len(self.iou) == len(self.source) == n):
            raise ContractError("feature set columns differ in length")
        bad = set(self.source.tolist()) - set(SOURCES)
        if bad:
            raise ContractError(f"unknown record source(s) {sorted(bad)}")

    @classmethod
    def empty(cls, D):
        return cls(np.zeros((0, D)), [], [], [])

    @property
    def D(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return FeatureSet(self.features[mask], self.labels[mask], self.iou[mask], self.source[mask])

    def where(self, labels=None, source=None, foreground=None):
        mask = np.ones(len(self), dtype=bool)
        if labels is not None:
            mask &= np.isin(self.labels, list(labels))
        if source is not None:
            mask &= self.source == source
        if foreground is not None:
            mask &= (self.labels != BACKGROUND_ID) == foreground
        return self.subset(mask)

    @staticmethod
    def concat(*sets):
        sets = [s for s in sets if s is not None]
        return FeatureSet(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.iou for s in sets]),
            np.concatenate([s.source for s in sets]),
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.iou, other.iou) and np.array_equal(self.source, other.source))


def write_features(fs, path, overwrite=True):
    lines = [f"{fs.D} {len(fs)}"]
    for f, y, t, s in zip(fs.features, fs.labels, fs.iou, fs.source):
        lines.append(f"{int(y)} {_fmt(t)} {s} " + " ".join(_fmt(v) for v in f))
    atomic_write_text(path, "\n".join(lines) + "\n", overwrite)


def read_features(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, expected header 'D N'", path, 1)
    try:
        D, N = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("malformed header, expected 'D N'", path, 1) from None
    rows = [l for l in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != N:
        raise ParseError(f"header declares {N} records, found {len(rows)}", path, 1)
    feats = np.zeros((N, D))
    labels = np.zeros(N, dtype=np.int64)
    ious = np.zeros(N)
    sources = []
    for i, line in enumerate(rows):
        parts = line.split()
        if len(parts) != D + 3:
            raise ParseError(f"expected {D + 3} fields, got {len(parts)}", path, i + 2)
        try:
            labels[i] = int(parts[0])
            ious[i] = float(parts[1])
            feats[i] = [float(v) for v in parts[3:]]
        except ValueError as e:
            raise ParseError(str(e), path, i + 2) from None
        if parts[2] not in SOURCES:
            raise ParseError(f"unknown source {parts[2]!r}", path, i + 2)
        sources.append(parts[2])
    return FeatureSet(feats, labels, ious, sources)


# ---------------------------------------------------------------------------
# semantics


def write_semantics(table, path, overwrite=True):
    lines = [f"{table.d} {table.S} {table.U}"]
    for ids, names, M in ((table.seen_ids, table.seen_names, table.Ws),
                          (table.unseen_ids, table.unseen_names, table.Wu)):
        for j, (cid, name) in enumerate(zip(ids, names)):
            lines.append(f"{cid} {name} " + " ".join(_fmt(v) for v in M[:, j]))
    atomic_write_text(path, "\n".join(lines) + "\n", overwrite)


def read_semantics(path):
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines()]
    if not lines:
        raise ParseError("empty file, expected header 'd S U'", path, 1)
    try:
        d, S, U = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("malformed header, expected 'd S U'", path, 1) from None
    body = [(i + 2, l) for i, l in enumerate(lines[1:]) if l.strip()]
    if len(body) != S + U:
        raise ParseError(f"header declares {S + U} classes, found {len(body)}", path, 1)
    ids, names, vecs = [], [], []
    for lineno, line in body:
        parts = line.split()
        if len(parts) != d + 2:
            raise ParseError(f"vector length {len(parts) - 2} does not match d={d}", path, lineno)
        try:
            ids.append(int(parts[0]))
            vecs.append([float(v) for v in parts[2:]])
        except ValueError as e:
            raise ParseError(str(e), path, lineno) from None
        names.append(parts[1])
    V = np.array(vecs, dtype=np.float64).reshape(S + U, d).T
    try:
        return SemanticTable(ids[:S], names[:S], V[:, :S], ids[S:], names[S:], V[:, S:])
    except ContractError as e:
        raise ParseError(str(e), path) from None


# ---------------------------------------------------------------------------
# toy world


@dataclass(frozen=True)
class ToyWorldSpec:
    d: int = 8
    D: int = 32
    S: int = 16
    U: int = 4
    sigma: float = 0.1
    sigma_bg: float = 0.2
    records_per_class: int = 200
    background_records: int = 800
    n_scenes: int = 40
    proposals_per_gt: int = 3
    background_proposals: int = 4
    fg_min: float = 0.7
    bg_max: float = 0.3
    proposal_iou_low: float = 0.6
    unseen_perturbation: float = 0.1
    offset_noise: float = 0.5
    image_size: float = 200.0

    def __post_init__(self):
        if min(self.d, self.D, self.S) < 1 or self.U < 0:
            raise ContractError("d, D, S must be >= 1 and U >= 0")
        if self.sigma <= 0 or self.sigma_bg <= 0:
            raise ContractError("noise scales must be positive")
        if not (0 < self.bg_max < self.fg_min < 1):
            raise ContractError("IoU policy needs 0 < bg_max < fg_min < 1")
        if not (0 < self.proposal_iou_low <= 1):
            raise ContractError("proposal_iou_low must be in (0, 1]")

    @classmethod
    def with_policy(cls, policy, **kw):
        fg, bg = POLICIES[policy]
        return cls(fg_min=fg, bg_max=bg, **kw)


@dataclass(frozen=True)
class Split:
    seen: tuple
    unseen: tuple

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ContractError("seen and unseen class ids overlap")

    @classmethod
    def default(cls, S=16, U=4):
        return cls(tuple(range(1, S + 1)), tuple(range(S + 1, S + U + 1)))


@dataclass
class ToyWorld:
    semantics: SemanticTable
    mixing: np.ndarray  # D x d
    spec: ToyWorldSpec
    parents: dict = field(default_factory=dict)  # unseen id -> (seen id, seen id)

    def clean_feature(self, class_id):
        return np.maximum(self.mixing @ self.semantics.vector(class_id), 0.0)


def gen_toy_world(spec, stream, split=None):
    split = split or Split.default(spec.S, spec.U)
    if len(split.seen) != spec.S or len(split.unseen) != spec.U:
        raise ContractError("split sizes do not match the world spec")
    Ws = stream.normal((spec.d, spec.S))
    Ws /= np.linalg.norm(Ws, axis=0)
    Wu = np.zeros((spec.d, spec.U))
    parents = {}
    for j in range(spec.U):
        a, b = stream.choice(np.arange(spec.S), 2) if spec.S > 1 else (0, 0)
        while spec.S > 1 and b == a:
            b = stream.integers(spec.S, 1)[0]
        lam = stream.uniform(1, 0.3, 0.7)[0]
        v = lam * Ws[:, a] + (1 - lam) * Ws[:, b]
        v /= np.linalg.norm(v)
        v = v + spec.unseen_perturbation * stream.normal(spec.d) / np.sqrt(spec.d)
        Wu[:, j] = v / np.linalg.norm(v)
        parents[split.unseen[j]] = (split.seen[a], split.seen[b])
    names_s = [f"class{c:02d}" for c in split.seen]
    names_u = [f"class{c:02d}" for c in split.unseen]
    table = SemanticTable(split.seen, names_s, Ws, split.unseen, names_u, Wu)
    M = stream.normal((spec.D, spec.d)) / np.sqrt(spec.d)
    return ToyWorld(table, M, spec, parents)


def _class_features(world, class_id, iou, stream):
    """``relu(M w_c + eps)`` with noise scale ``sigma * (1 + (1 - iou))``."""
    spec = world.spec
    iou = np.asarray(iou, dtype=np.float64)
    base = world.mixing @ world.semantics.vector(class_id)
    scale = spec.sigma * (1.0 + (1.0 - iou))
    eps = stream.normal((len(iou), spec.D)) * scale[:, None]
    return np.maximum(base + eps, 0.0)


def _background_features(world, n, stream):
    return np.maximum(stream.normal((n, world.spec.D)) * world.spec.sigma_bg, 0.0)


def gen_feature_set(world, spec, stream, split=None):
    """Real seen foreground + background records, plus held-out unseen records."""
    table = world.semantics
    n = spec.records_per_class
    parts = []
    for cid in table.seen_ids + table.unseen_ids:
        iou = stream.uniform(n, spec.fg_min, 1.0)
        src = "real" if table.is_seen(cid) else "heldout"
        parts.append(FeatureSet(_class_features(world, cid, iou, stream), np.full(n, cid), iou, [src] * n))
    nb = spec.background_records
    iou = stream.uniform(nb, 0.0, spec.bg_max)
    parts.append(FeatureSet(_background_features(world, nb, stream), np.full(nb, BACKGROUND_ID), iou, ["real"] * nb))
    return FeatureSet.concat(*parts)


# ---------------------------------------------------------------------------
# detection scenes


@dataclass
class Scene:
    image_id: int
    gt_boxes: np.ndarray  # G x 4
    gt_classes: np.ndarray
    boxes: np.ndarray  # P x 4 proposal boxes
    features: np.ndarray  # P x D
    offsets: np.ndarray = None  # P x S x 4, additive (dx1, dy1, dx2, dy2)

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64)
            if self.offsets.shape[:1] != (len(self.boxes),) or self.offsets.shape[2:] != (4,):
                raise ContractError("offsets must have shape (P, S, 4)")
        if len(self.features) != len(self.boxes):
            raise ContractError("proposal boxes and features differ in length")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.image_id == other.image_id
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("gt_boxes", "gt_classes", "boxes", "features"))
                and ((self.offsets is None and other.offsets is None)
                     or (self.offsets is not None and other.offsets is not None
                         and np.array_equal(self.offsets, other.offsets))))


def jitter_box(gt, target_iou, stream):
    """Box with IoU exactly ``target_iou`` against ``gt`` (up to rounding).

    Shifts along x, along y, or diagonally; each shift length is the closed-form
    solution of IoU(shifted, gt) = target.
    """
    x1, y1, x2, y2 = gt
    W, H = x2 - x1, y2 - y1
    t = float(target_iou)
    if t >= 1.0:
        return np.array(gt, dtype=np.float64)
    mode = int(stream.integers(3, 1)[0])
    sx, sy = np.where(stream.uniform(2) < 0.5, -1.0, 1.0)
    if mode == 2:
        a = 1.0 - np.sqrt(2.0 * t / (1.0 + t))
        dx, dy = sx * a * W, sy * a * H
    elif mode == 0:
        dx, dy = sx * W * (1.0 - t) / (1.0 + t), 0.0
    else:
        dx, dy = 0.0, sy * H * (1.0 - t) / (1.0 + t)
    return np.array([x1 + dx, y1 + dy, x2 + dx, y2 + dy])


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _random_box(stream, size):
    w, h = stream.uniform(2, 0.1 * size, 0.3 * size)
    x, y = stream.uniform(1, 0, size - w)[0], stream.uniform(1, 0, size - h)[0]
    return np.array([x, y, x + w, y + h])


def _offsets_for(world, true_class, box, gt, stream):
    """Per-seen-class offsets; the true class maps ``box`` exactly onto ``gt``.

    Other classes' regressors err in proportion to their semantic distance
    from the true class, so similar classes predict similar corrections.
    """
    table = world.semantics
    delta = gt - box
    size = 0.5 * ((gt[2] - gt[0]) + (gt[3] - gt[1]))
    out = np.empty((table.S, 4))
    wc = table.vector(true_class) if true_class != BACKGROUND_ID else None
    noise = stream.normal((table.S, 4))
    for j, sid in enumerate(table.seen_ids):
        if sid == true_class:
            out[j] = delta
            continue
        dist = 1.0 if wc is None else 0.5 * (1.0 - float(table.Ws[:, j] @ wc))
        out[j] = delta + world.spec.offset_noise * dist * size * noise[j]
    return out


def gen_detection_scenes(world, spec, stream, n_scenes=None, with_offsets=True):
    """Scenes of 1-5 ground truths, each with jittered proposals and background proposals.

    Every scene holds at least one unseen object when unseen classes exist.
    Each scene draws from its own sub-stream keyed by its index.
    """
    table = world.semantics
    n_scenes = spec.n_scenes if n_scenes is None else n_scenes
    all_ids = np.array(table.all_ids)
    scenes = []
    for i in range(n_scenes):
        rs = stream.spawn(i)
        G = int(rs.integers(5, 1)[0]) + 1
        classes = rs.choice(all_ids, G)
        if table.U and not any(table.is_unseen(c) for c in classes):
            classes[int(rs.integers(G, 1)[0])] = rs.choice(np.array(table.unseen_ids), 1)[0]
        gts = [_random_box(rs, spec.image_size) for _ in range(G)]
        boxes, feats, offs = [], [], []
        for gt, c in zip(gts, classes):
            targets = rs.uniform(spec.proposals_per_gt, spec.proposal_iou_low, 1.0)
            for t in targets:
                b = jitter_box(gt, t, rs)
                boxes.append(b)
                feats.append(_class_features(world, c, np.array([_box_iou(b, gt)]), rs)[0])
                offs.append(_offsets_for(world, c, b, gt, rs))
        for _ in range(spec.background_proposals):
            for _try in range(100):
                b = _random_box(rs, spec.image_size)
                if all(_box_iou(b, gt) <= spec.bg_max for gt in gts):
                    break
            else:
                continue
            boxes.append(b)
            feats.append(_background_features(world, 1, rs)[0])
            offs.append(_offsets_for(world, BACKGROUND_ID, b, b, rs))
        scenes.append(Scene(
            i, np.array(gts), classes, np.array(boxes), np.array(feats),
            np.array(offs) if with_offsets else None,
        ))
    return scenes


def scenes_to_json(scenes):
    images = []
    for sc in scenes:
        props = []
        for k in range(len(sc.boxes)):
            entry = [sc.boxes[k].tolist(), sc.features[k].tolist()]
            if sc.offsets is not None:
                entry.append(sc.offsets[k].tolist())
            props.append(entry)
        images.append({
            "image_id": int(sc.image_id),
            "gts": [[int(c), b.tolist()] for c, b in zip(sc.gt_classes, sc.gt_boxes)],
            "proposals": props,
        })
    return json.dumps({"images": images}, separators=(",", ":"))


def write_scenes(scenes, path, overwrite=True):
    atomic_write_text(path, scenes_to_json(scenes) + "\n", overwrite)


def read_scenes(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    scenes = []
    for img in doc.get("images", []):
        gts = img.get("gts", [])
        props = img.get("proposals", [])
        has_off = bool(props) and all(len(p) == 3 for p in props)
        D = len(props[0][1]) if props else 0
        scenes.append(Scene(
            int(img["image_id"]),
            np.array([g[1] for g in gts]).reshape(-1, 4),
            [g[0] for g in gts],
            np.array([p[0] for p in props]).reshape(-1, 4),
            np.array([p[1] for p in props]).reshape(len(props), D),
            np.array([p[2] for p in props]) if has_off else None,
        ))
    return scenes
