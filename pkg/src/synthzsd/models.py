"""Generator, critic, classifier head and semantic-projection classifier.

All networks take batches as rows (``(B, dim)`` arrays); single vectors are
accepted where noted and promoted to a batch of one.  Backward passes return
gradient dicts keyed like ``Model.params()``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, ParseError
from .numerics import leaky_relu, leaky_relu_grad, softmax

DEFAULT_SLOPE = 0.2
BACKGROUND_ID = 0


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractError(f"{what}: expected last dimension {dim}, got shape {x.shape}")
    return x, single


@dataclass
class SemanticTable:
    """Seen and unseen class embeddings, stored column-wise (``d x S``, ``d x U``).

    Vectors are L2-normalised on construction.
    """

    seen_ids: tuple
    seen_names: tuple
    Ws: np.ndarray
    unseen_ids: tuple
    unseen_names: tuple
    Wu: np.ndarray

    def __post_init__(self):
        self.seen_ids = tuple(int(i) for i in self.seen_ids)
        self.unseen_ids = tuple(int(i) for i in self.unseen_ids)
        self.seen_names = tuple(self.seen_names)
        self.unseen_names = tuple(self.unseen_names)
        Ws = np.array(self.Ws, dtype=np.float64)
        Wu = np.array(self.Wu, dtype=np.float64)
        d = Ws.shape[0] if Ws.ndim == 2 else Wu.shape[0]
        Ws = Ws.reshape(d, -1)
        Wu = Wu.reshape(d, -1)
        if Ws.shape[1] != len(self.seen_ids) or Wu.shape[1] != len(self.unseen_ids):
            raise ContractError("semantic matrix column count does not match id list")
        if len(self.seen_names) != len(self.seen_ids) or len(self.unseen_names) != len(self.unseen_ids):
            raise ContractError("name list length does not match id list")
        ids = self.seen_ids + self.unseen_ids
        if len(set(ids)) != len(ids):
            raise ContractError("class ids must be unique and seen/unseen disjoint")
        if BACKGROUND_ID in ids:
            raise ContractError(f"class id {BACKGROUND_ID} is reserved for background")
        for M in (Ws, Wu):
            if M.size and not np.all(np.isfinite(M)):
                raise ContractError("non-finite semantic vector")
            norms = np.linalg.norm(M, axis=0)
            if np.any(norms == 0):
                raise ContractError("zero semantic vector cannot be normalised")
            # already-unit columns are left untouched so file round-trips are exact
            scale = np.where(np.abs(norms - 1.0) > 1e-12, norms, 1.0)
            M /= scale
        self.Ws, self.Wu = Ws, Wu
        self._col = {cid: (True, j) for j, cid in enumerate(self.seen_ids)}
        self._col.update({cid: (False, j) for j, cid in enumerate(self.unseen_ids)})
        self._flat = {cid: j for j, cid in enumerate(self.seen_ids + self.unseen_ids)}
        self._stacked = np.concatenate([Ws, Wu], axis=1).T

    @property
    def d(self):
        return self.Ws.shape[0]

    @property
    def S(self):
        return len(self.seen_ids)

    @property
    def U(self):
        return len(self.unseen_ids)

    @property
    def all_ids(self):
        return self.seen_ids + self.unseen_ids

    def is_seen(self, class_id):
        return self._col.get(int(class_id), (False, None))[0]

    def is_unseen(self, class_id):
        entry = self._col.get(int(class_id))
        return entry is not None and not entry[0]

    def vector(self, class_id):
        try:
            seen, j = self._col[int(class_id)]
        except KeyError:
            raise ContractError(f"class id {class_id} has no semantic vector") from None
        return (self.Ws if seen else self.Wu)[:, j]

    def vectors(self, class_ids):
        """Row-stacked semantic vectors (``B x d``) for a label array."""
        ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
        try:
            cols = np.array([self._flat[int(c)] for c in ids], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"class id {e.args[0]} has no semantic vector") from None
        return self._stacked[cols]

    def __eq__(self, other):
        if not isinstance(other, SemanticTable):
            return NotImplemented
        return (self.seen_ids == other.seen_ids and self.unseen_ids == other.unseen_ids
                and self.seen_names == other.seen_names and self.unseen_names == other.unseen_names
                and np.array_equal(self.Ws, other.Ws) and np.array_equal(self.Wu, other.Wu))


# ---------------------------------------------------------------------------
# parameter containers


class _Model:
    _kind = ""
    _blocks = ()
    _meta = ()

    def params(self):
        return {k: getattr(self, k) for k in self._blocks}

    def with_params(self, params):
        return replace(self, **params)

    def copy(self):
        return replace(self, **{k: np.array(getattr(self, k), copy=True) for k in self._blocks})

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(getattr(self, m) == getattr(other, m) for m in self._meta) and all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True) for k in self._blocks
        )


@dataclass(eq=False)
class GeneratorParams(_Model):
    W1: np.ndarray  # H x 2d, acting on [w; z]
    b1: np.ndarray
    W2: np.ndarray  # D x H
    b2: np.ndarray
    slope: float = DEFAULT_SLOPE

    _kind = "generator"
    _blocks = ("W1", "b1", "W2", "b2")
    _meta = ("slope",)

    @property
    def d(self):
        return self.W1.shape[1] // 2

    @property
    def H(self):
        return self.W1.shape[0]

    @property
    def D(self):
        return self.W2.shape[0]


@dataclass(eq=False)
class CriticParams(_Model):
    W1: np.ndarray  # H x (D + d), acting on [f; w]
    b1: np.ndarray
    w2: np.ndarray  # H
    b2: float
    D: int = 0
    slope: float = DEFAULT_SLOPE

    _kind = "critic"
    _blocks = ("W1", "b1", "w2", "b2")
    _meta = ("D", "slope")

    def __post_init__(self):
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(())
        if self.D <= 0:
            raise ContractError("critic feature dimension D must be positive")

    @property
    def d(self):
        return self.W1.shape[1] - self.D

    @property
    def H(self):
        return self.W1.shape[0]


@dataclass(eq=False)
class ClassifierHead(_Model):
    """Linear softmax head. Row 0 is background, then seen rows, then unseen rows.

    Rows whose ``initialized`` flag is false hold NaN until trained.
    """

    W: np.ndarray  # (1 + S + U) x D
    b: np.ndarray
    class_ids: np.ndarray
    initialized: np.ndarray
    n_seen: int = 0
    n_unseen: int = 0

    _kind = "classifier"
    _blocks = ("W", "b", "class_ids", "initialized")
    _meta = ("n_seen", "n_unseen")

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.initialized = np.asarray(self.initialized, dtype=bool)
        self._row = {int(c): i for i, c in enumerate(self.class_ids)}

    def params(self):
        return {"W": self.W, "b": self.b}

    @property
    def D(self):
        return self.W.shape[1]

    @property
    def seen_rows(self):
        return np.arange(1, 1 + self.n_seen)

    @property
    def unseen_rows(self):
        return np.arange(1 + self.n_seen, 1 + self.n_seen + self.n_unseen)

    def rows_for(self, mode):
        if mode == "zsd":
            return np.concatenate([[0], self.unseen_rows])
        if mode == "gzsd":
            return np.arange(len(self.class_ids))
        if mode == "seen":
            return np.concatenate([[0], self.seen_rows])
        raise ContractError(f"unknown mode {mode!r}")

    def row_of(self, class_id):
        try:
            return self._row[int(class_id)]
        except KeyError:
            raise ContractError(f"class id {class_id} not in classifier head") from None


@dataclass(eq=False)
class SemanticClassifier(_Model):
    """``softmax(semantics^T (W_fc f + b_fc))`` with frozen ``semantics``."""

    W_fc: np.ndarray  # d x D
    b_fc: np.ndarray
    semantics: np.ndarray  # d x K, not trainable
    class_ids: np.ndarray

    _kind = "semantic_classifier"
    _blocks = ("W_fc", "b_fc", "semantics", "class_ids")
    _meta = ()

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.semantics.shape[0] != self.W_fc.shape[0]:
            raise ContractError("semantics dimension does not match projection output")
        if self.semantics.shape[1] != len(self.class_ids):
            raise ContractError("semantics column count does not match class ids")

    def params(self):
        return {"W_fc": self.W_fc, "b_fc": self.b_fc}

    def attach(self, semantics, class_ids):
        """Same projection parameters, different (frozen) semantics matrix."""
        return SemanticClassifier(self.W_fc, self.b_fc, np.asarray(semantics, dtype=np.float64), class_ids)

    def attach_seen(self, table):
        return self.attach(table.Ws, table.seen_ids)

    def attach_unseen(self, table):
        return self.attach(table.Wu, table.unseen_ids)

    @property
    def D(self):
        return self.W_fc.shape[1]


# ---------------------------------------------------------------------------
# initialisation


def _gauss(stream, rows, cols):
    return stream.normal((rows, cols)) / np.sqrt(cols)


def init_generator(d, D, H, stream, slope=DEFAULT_SLOPE):
    return GeneratorParams(_gauss(stream, H, 2 * d), np.zeros(H), _gauss(stream, D, H), np.zeros(D), slope)


def init_critic(d, D, H, stream, slope=DEFAULT_SLOPE):
    return CriticParams(_gauss(stream, H, D + d), np.zeros(H), _gauss(stream, 1, H)[0], 0.0, D, slope)


def init_classifier_head(table, D, stream):
    n = 1 + table.S + table.U
    W = np.full((n, D), np.nan)
    b = np.full(n, np.nan)
    W[: 1 + table.S] = _gauss(stream, 1 + table.S, D)
    b[: 1 + table.S] = 0.0
    initialized = np.zeros(n, dtype=bool)
    initialized[: 1 + table.S] = True
    ids = (BACKGROUND_ID,) + table.seen_ids + table.unseen_ids
    return ClassifierHead(W, b, ids, initialized, table.S, table.U)


def init_unseen_rows(head, stream):
    """Gaussian (std 1/sqrt(D)) unseen rows, zero biases; other rows untouched."""
    W = head.W.copy()
    b = head.b.copy()
    rows = head.unseen_rows
    W[rows] = _gauss(stream, len(rows), head.D)
    b[rows] = 0.0
    init = head.initialized.copy()
    init[rows] = True
    return replace(head, W=W, b=b, initialized=init)


def init_semantic_classifier(table, D, stream):
    return SemanticClassifier(_gauss(stream, table.d, D), np.zeros(table.d), table.Ws, table.seen_ids)


# ---------------------------------------------------------------------------
# generator


def generator_cache(g, w, z):
    W, _ = _as_batch(w, g.d, "semantic vector")
    Z, _ = _as_batch(z, g.d, "noise vector")
    if W.shape[0] != Z.shape[0]:
        raise ContractError("semantic and noise batches differ in length")
    X = np.concatenate([W, Z], axis=1)
    A = X @ g.W1.T + g.b1
    Hh = leaky_relu(A, g.slope)
    O = Hh @ g.W2.T + g.b2
    return X, A, Hh, O, np.maximum(O, 0.0)


def generator_forward(g, w, z):
    _, single = _as_batch(w, g.d, "semantic vector")
    F = generator_cache(g, w, z)[-1]
    return F[0] if single else F


def generator_backward(g, cache, dF):
    """Parameter gradients given ``dL/dF`` for a cached batch."""
    X, A, Hh, O, _ = cache
    dO = dF * (O > 0)
    dA = (dO @ g.W2) * leaky_relu_grad(A, g.slope)
    return {"W1": dA.T @ X, "b1": dA.sum(0), "W2": dO.T @ Hh, "b2": dO.sum(0)}


# ---------------------------------------------------------------------------
# critic


def critic_cache(c, f, w):
    F, _ = _as_batch(f, c.D, "feature")
    W, _ = _as_batch(w, c.d, "semantic vector")
    if F.shape[0] != W.shape[0]:
        raise ContractError("feature and semantic batches differ in length")
    X = np.concatenate([F, W], axis=1)
    A = X @ c.W1.T + c.b1
    Hh = leaky_relu(A, c.slope)
    return X, A, Hh, Hh @ c.w2 + c.b2


def critic_forward(c, f, w):
    _, single = _as_batch(f, c.D, "feature")
    s = critic_cache(c, f, w)[-1]
    return float(s[0]) if single else s


def critic_backward(c, cache, dscore):
    """Parameter gradients given ``dL/dscore`` (length-B vector)."""
    X, A, Hh, _ = cache
    dA = np.outer(dscore, c.w2) * leaky_relu_grad(A, c.slope)
    return {"W1": dA.T @ X, "b1": dA.sum(0), "w2": Hh.T @ dscore, "b2": np.asarray(np.sum(dscore))}


def critic_input_grad(c, f, w):
    """Closed-form gradient of the critic score with respect to the feature input."""
    _, single = _as_batch(f, c.D, "feature")
    _, A, _, _ = critic_cache(c, f, w)
    V = leaky_relu_grad(A, c.slope) * c.w2
    G = V @ c.W1[:, : c.D]
    return G[0] if single else G


# ---------------------------------------------------------------------------
# classifiers


def classifier_logits(h, f, rows=None):
    F, _ = _as_batch(f, h.D, "feature")
    rows = np.arange(len(h.class_ids)) if rows is None else np.asarray(rows)
    if not np.all(h.initialized[rows]):
        raise ContractError("classifier head has uninitialised active rows")
    return F @ h.W[rows].T + h.b[rows]


def classifier_forward(h, f, active_rows=None):
    _, single = _as_batch(f, h.D, "feature")
    p = softmax(classifier_logits(h, f, active_rows))
    return p[0] if single else p


def semantic_logits(sc, f):
    F, _ = _as_batch(f, sc.D, "feature")
    return (F @ sc.W_fc.T + sc.b_fc) @ sc.semantics


def semantic_classifier_forward(sc, f):
    _, single = _as_batch(f, sc.D, "feature")
    p = softmax(semantic_logits(sc, f))
    return p[0] if single else p


def semantic_project(sc, f):
    """Projected feature ``W_fc f + b_fc`` in semantic space."""
    F, single = _as_batch(f, sc.D, "feature")
    P = F @ sc.W_fc.T + sc.b_fc
    return P[0] if single else P


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: ASCII header lines, terminated by "end\n", then every block as
# little-endian float64 in header order.
#
#   synthzsd-model 1
#   kind <kind>
#   meta <key>=<value> ...
#   blocks <name>:<dim>x<dim> ...      (scalar blocks have shape "")
#   end

_MAGIC = "synthzsd-model 1"
_KINDS = {cls._kind: cls for cls in (GeneratorParams, CriticParams, ClassifierHead, SemanticClassifier)}


def dump_model_bytes(model):
    blocks = [np.asarray(getattr(model, k), dtype="<f8") for k in model._blocks]
    meta = " ".join(f"{m}={getattr(model, m)!r}" for m in model._meta)
    shapes = " ".join(f"{k}:{'x'.join(str(s) for s in b.shape)}" for k, b in zip(model._blocks, blocks))
    header = f"{_MAGIC}\nkind {model._kind}\nmeta {meta}\nblocks {shapes}\nend\n"
    return header.encode("ascii") + b"".join(b.tobytes(order="C") for b in blocks)


def load_model_bytes(data, path=None):
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ParseError("truncated checkpoint header", path, len(lines) + 1)
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != _MAGIC:
        raise ParseError("not a synthzsd model checkpoint", path, 1)
    fields_ = dict(l.split(" ", 1) if " " in l else (l, "") for l in lines[1:])
    cls = _KINDS.get(fields_.get("kind"))
    if cls is None:
        raise ParseError(f"unknown model kind {fields_.get('kind')!r}", path, 2)
    kwargs = {}
    for item in fields_.get("meta", "").split():
        k, v = item.split("=", 1)
        kwargs[k] = float(v) if "." in v or "e" in v else int(v)
    for item in fields_.get("blocks", "").split():
        name, shape = item.split(":")
        shape = tuple(int(s) for s in shape.split("x")) if shape else ()
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * n
        if end > len(data):
            raise ParseError(f"block {name!r} truncated", path)
        kwargs[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(data):
        raise ParseError("trailing bytes after last block", path)
    if cls is CriticParams:
        kwargs["b2"] = float(kwargs["b2"])
    return cls(**kwargs)


def save_model(model, path):
    from .datakit import atomic_write_bytes

    atomic_write_bytes(path, dump_model_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read(), path)
