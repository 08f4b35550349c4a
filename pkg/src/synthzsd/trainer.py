"""Training: seen classifiers, the conditional WGAN, synthesis and head update.

``train_all`` runs the full sequence: fit the detection head and the
semantic-projection classifier on real seen features, train the generator
against a critic with the classifier regularisers, synthesize unseen
features and extend the head with them.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datakit import FeatureSet, atomic_write_text
from .errors import ContractError, DataError, DivergenceError
from .losses import (
    LossReport,
    LossWeights,
    critic_loss,
    diversity_loss,
    draw_mix,
    draw_noise_pairs,
    generator_adv_loss,
    generator_total_loss,
    lcs_loss,
    lcu_loss,
)
from .models import (
    BACKGROUND_ID,
    generator_forward,
    init_classifier_head,
    init_critic,
    init_generator,
    init_semantic_classifier,
    init_unseen_rows,
    classifier_logits,
    semantic_logits,
)
from .numerics import AdamState, RandomStream, adam_step, log_softmax, softmax

log = logging.getLogger(__name__)

UPDATE_MODES = ("frozen-seen", "joint")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 5
    batch_size: int = 64
    gan_epochs: int = 200
    hidden: int = 64
    features_per_unseen_class: int = 300
    classifier_epochs: int = 30
    classifier_lr: float = 1e-3
    seen_classifier_epochs: int = 30
    semantic_epochs: int = 30
    penalty_mix: str = "uniform"
    update_mode: str = "frozen-seen"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_critic", "batch_size", "hidden"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("gan_epochs", "features_per_unseen_class", "classifier_epochs",
                     "seen_classifier_epochs", "semantic_epochs"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.penalty_mix not in ("uniform", "normal"):
            raise ContractError(f"unknown penalty_mix {self.penalty_mix!r}")
        if self.update_mode not in UPDATE_MODES:
            raise ContractError(f"unknown update_mode {self.update_mode!r}")

    def streams(self):
        root = RandomStream(self.seed)
        return {name: root.spawn(i) for i, name in
                enumerate(("seen_cls", "sem_cls", "gan", "synth", "update", "misc"), start=1)}


@dataclass
class TrainedArtifacts:
    generator: object
    critic: object
    head_seen: object
    head: object
    semantic_classifier: object
    log: list
    synthetic: FeatureSet = None


# ---------------------------------------------------------------------------
# helpers


def _batches(n, batch_size, stream):
    perm = np.argsort(stream.uniform(n), kind="stable")
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _accuracy(logits, targets):
    return float(np.mean(np.argmax(logits, axis=1) == targets)) if len(targets) else float("nan")


def _ce_grad(logits, targets):
    B = len(targets)
    value = -float(log_softmax(logits)[np.arange(B), targets].mean())
    d = softmax(logits)
    d[np.arange(B), targets] -= 1.0
    return value, d / B


def _adam(params, lr, cfg):
    return AdamState.zeros_like(params, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2)


# ---------------------------------------------------------------------------
# classifiers on real features


def train_seen_classifier(features, semantics, cfg, stream=None):
    """Background + seen rows fitted by cross-entropy; returns ``(head, train_accuracy)``."""
    stream = stream or cfg.streams()["seen_cls"]
    data = features.where(labels=(BACKGROUND_ID,) + semantics.seen_ids, source="real")
    present = set(np.unique(data.labels).tolist())
    missing = [c for c in (BACKGROUND_ID,) + semantics.seen_ids if c not in present]
    if missing:
        raise DataError(f"no real records for class id(s) {missing}")
    head = init_classifier_head(semantics, features.D, stream)
    rows = head.rows_for("seen")
    targets = np.array([head.row_of(y) for y in data.labels])  # rows are 0..S here
    params = {"W": head.W[rows], "b": head.b[rows]}
    state = _adam(params, cfg.classifier_lr, cfg)
    for _ in range(cfg.seen_classifier_epochs):
        for idx in _batches(len(data), cfg.batch_size, stream):
            logits = data.features[idx] @ params["W"].T + params["b"]
            _, d = _ce_grad(logits, targets[idx])
            params, state = adam_step(params, {"W": d.T @ data.features[idx], "b": d.sum(0)}, state)
    W, b = head.W.copy(), head.b.copy()
    W[rows], b[rows] = params["W"], params["b"]
    head = replace(head, W=W, b=b)
    acc = _accuracy(classifier_logits(head, data.features, rows), targets)
    log.info("seen classifier: train accuracy %.4f", acc)
    return head, acc


def train_semantic_classifier(features, semantics, cfg, stream=None, init=None):
    """Fit ``W_fc, b_fc`` with ``W_s`` frozen; returns ``(classifier, train_accuracy)``."""
    stream = stream or cfg.streams()["sem_cls"]
    data = features.where(foreground=True)
    for y in np.unique(data.labels):
        if not semantics.is_seen(y):
            raise DataError(f"label {y} has no seen semantic vector")
    sc = init if init is not None else init_semantic_classifier(semantics, features.D, stream)
    sc = sc.attach_seen(semantics)
    col = {c: j for j, c in enumerate(semantics.seen_ids)}
    targets = np.array([col[int(y)] for y in data.labels], dtype=np.int64)
    params = sc.params()
    state = _adam(params, cfg.classifier_lr, cfg)
    Ws = semantics.Ws
    for _ in range(cfg.semantic_epochs):
        for idx in _batches(len(data), cfg.batch_size, stream):
            F = data.features[idx]
            logits = (F @ params["W_fc"].T + params["b_fc"]) @ Ws
            _, d = _ce_grad(logits, targets[idx])
            dP = d @ Ws.T
            params, state = adam_step(params, {"W_fc": dP.T @ F, "b_fc": dP.sum(0)}, state)
    sc = sc.with_params(params)
    acc = _accuracy(semantic_logits(sc, data.features), targets) if len(data) else float("nan")
    log.info("semantic classifier: train accuracy %.4f", acc)
    return sc, acc


# ---------------------------------------------------------------------------
# GAN


def _finite(*values):
    return all(math.isfinite(v) for v in values)


def train_gan(features, semantics, head, sc_seen, cfg, stream=None, audit=None, init=None):
    """Alternating critic/generator optimisation; returns ``(generator, critic, log)``.

    Each generator step follows exactly ``n_critic`` critic steps.  An epoch is
    ``ceil(N / batch_size)`` critic steps over the ``N`` real seen foreground
    records.  ``audit(event, info)`` is called after every update with the
    real records used (critic) or the labels conditioned on (generator).
    """
    stream = stream or cfg.streams()["gan"]
    data = features.where(labels=semantics.seen_ids, source="real")
    if len(data) == 0:
        raise DataError("no real seen foreground features to train the GAN on")
    wts = cfg.weights
    d, D = semantics.d, features.D
    if init is None:
        g = init_generator(d, D, cfg.hidden, stream)
        c = init_critic(d, D, cfg.hidden, stream)
    else:
        g, c = init
    sc_unseen = sc_seen.attach_unseen(semantics) if semantics.U else None
    by_class = [np.nonzero(data.labels == cid)[0] for cid in semantics.seen_ids]
    classes = np.array([cid for cid, ix in zip(semantics.seen_ids, by_class) if len(ix)])
    members = np.concatenate([ix for ix in by_class if len(ix)])
    counts = np.array([len(ix) for ix in by_class if len(ix)])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    B = cfg.batch_size
    g_state = _adam(g.params(), cfg.lr, cfg)
    c_state = _adam(c.params(), cfg.lr, cfg)
    steps_per_epoch = max(1, math.ceil(len(data) / B))
    gen_steps = (steps_per_epoch * cfg.gan_epochs) // cfg.n_critic
    reports = []
    wgan = pen = crit_total = 0.0
    critic_steps = 0

    def sample_real():
        k = stream.integers(len(classes), B)
        within = np.minimum((stream.uniform(B) * counts[k]).astype(np.int64), counts[k] - 1)
        return classes[k], members[starts[k] + within]

    for step in range(gen_steps):
        epoch = (step * cfg.n_critic) // steps_per_epoch
        last_good = (g, c)
        for _ in range(cfg.n_critic):
            labels, idx = sample_real()
            w = semantics.vectors(labels)
            fake = generator_forward(g, w, stream.normal((B, d)))
            mix = draw_mix(stream, B, cfg.penalty_mix)
            crit_total, grads, (wgan, pen) = critic_loss(c, data.features[idx], fake, w, wts, mix)
            if not _finite(crit_total):
                raise DivergenceError(f"non-finite critic loss at generator step {step}", last_good)
            params, c_state = adam_step(c.params(), grads, c_state)
            c = c.with_params(params)
            critic_steps += 1
            if audit is not None:
                audit("critic", {"labels": labels, "source": data.source[idx], "generator": g, "critic": c})

        labels = stream.choice(classes, B)
        w = semantics.vectors(labels)
        z = stream.normal((B, d))
        terms = {"adv": generator_adv_loss(c, g, w, z)}
        terms["lcs"] = lcs_loss(g, head, w, labels, z) if wts.alpha2 > 0 else None
        if wts.alpha3 > 0 and sc_unseen is not None and epoch >= wts.warmup_epochs:
            u_labels = stream.choice(np.array(semantics.unseen_ids), B)
            terms["lcu"] = lcu_loss(g, sc_unseen, semantics.vectors(u_labels), u_labels, stream.normal((B, d)))
        else:
            terms["lcu"] = None
        if wts.alpha4 > 0:
            z1, z2 = draw_noise_pairs(stream, B, d)
            terms["div"] = diversity_loss(g, w, z1, z2)
        else:
            terms["div"] = None
        total, grads, _ = generator_total_loss(terms, wts, epoch)
        val = {k: (t[0] if t is not None else 0.0) for k, t in terms.items()}
        if not _finite(total, *val.values()):
            raise DivergenceError(f"non-finite generator loss at step {step}", last_good)
        params, g_state = adam_step(g.params(), grads, g_state)
        g = g.with_params(params)
        reports.append(LossReport(step, wgan, pen, val["adv"], val["lcs"], val["lcu"], val["div"], total, crit_total))
        if audit is not None:
            audit("generator", {"labels": labels, "generator": g, "critic": c, "epoch": epoch})
        if step % max(1, gen_steps // 10) == 0:
            log.info("gan step %d/%d epoch %d: wgan %.4f pen %.4f lcs %.4f lcu %.4f div %.4f",
                     step, gen_steps, epoch, wgan, pen, val["lcs"], val["lcu"], val["div"])
    return g, c, reports


def write_training_log(reports, path, overwrite=True):
    lines = ["\t".join(LossReport.COLUMNS)] + [r.row() for r in reports]
    atomic_write_text(path, "\n".join(lines) + "\n", overwrite)


def read_training_log(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    cols = lines[0].split("\t")
    return [dict(zip(cols, (float(v) for v in l.split("\t")))) for l in lines[1:] if l]


# ---------------------------------------------------------------------------
# synthesis and head update


def synthesize_features(g, semantics, n_per_class, stream):
    if n_per_class < 0:
        raise ContractError("n_per_class must be non-negative")
    parts = []
    for cid in semantics.unseen_ids:
        z = stream.normal((n_per_class, semantics.d))
        w = np.broadcast_to(semantics.vector(cid), (n_per_class, semantics.d))
        F = generator_forward(g, w, z) if n_per_class else np.zeros((0, g.D))
        parts.append(FeatureSet(F, np.full(n_per_class, cid), np.ones(n_per_class), ["synthetic"] * n_per_class))
    if not parts:
        return FeatureSet.empty(g.D)
    return FeatureSet.concat(*parts)


def update_classifier(head, synthetic, real_seen_bg, cfg, mode=None, stream=None):
    """Train unseen rows on synthetic unseen features mixed with real seen/background ones.

    ``frozen-seen`` masks gradients to the unseen rows (real records act only
    as negatives for them); ``joint`` fine-tunes every row.
    """
    mode = mode or cfg.update_mode
    if mode not in UPDATE_MODES:
        raise ContractError(f"unknown update mode {mode!r}")
    stream = stream or cfg.streams()["update"]
    ids = head.class_ids[head.unseen_rows]
    counts = {int(c): int(np.sum(synthetic.labels == c)) for c in ids}
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise DataError(f"no synthetic features for unseen class id(s) {empty}")
    if not np.all(head.initialized[head.unseen_rows]):
        head = init_unseen_rows(head, stream)
    if real_seen_bg is not None and len(real_seen_bg):
        real = real_seen_bg.where(labels=head.class_ids[head.rows_for("seen")].tolist())
        data = FeatureSet.concat(synthetic, real)
    else:
        data = synthetic
    targets = np.array([head.row_of(y) for y in data.labels])
    params = head.params()
    mask = np.zeros((len(head.class_ids), 1))
    mask[head.unseen_rows if mode == "frozen-seen" else slice(None)] = 1.0
    state = _adam(params, cfg.classifier_lr, cfg)
    for _ in range(cfg.classifier_epochs):
        for idx in _batches(len(data), cfg.batch_size, stream):
            F = data.features[idx]
            logits = F @ params["W"].T + params["b"]
            _, d = _ce_grad(logits, targets[idx])
            grads = {"W": (d.T @ F) * mask, "b": d.sum(0) * mask[:, 0]}
            # masked rows keep zero moments, so their Adam update is exactly zero
            params, state = adam_step(params, grads, state)
    return head.with_params(params)


def classifier_accuracy(head, fs, rows):
    rows = np.asarray(rows)
    pos = {int(head.class_ids[r]): i for i, r in enumerate(rows)}
    targets = np.array([pos[int(y)] for y in fs.labels])
    return _accuracy(classifier_logits(head, fs.features, rows), targets)


def train_all(features, semantics, cfg, audit=None):
    """Full training sequence on a real feature set."""
    st = cfg.streams()
    head_seen, _ = train_seen_classifier(features, semantics, cfg, st["seen_cls"])
    sc, _ = train_semantic_classifier(features.where(labels=semantics.seen_ids, source="real"),
                                      semantics, cfg, st["sem_cls"])
    g, c, reports = train_gan(features, semantics, head_seen, sc, cfg, st["gan"], audit=audit)
    synth = synthesize_features(g, semantics, cfg.features_per_unseen_class, st["synth"])
    real = features.where(labels=(BACKGROUND_ID,) + semantics.seen_ids, source="real")
    head = update_classifier(head_seen, synth, real, cfg, stream=st["update"])
    return TrainedArtifacts(g, c, head_seen, head, sc, reports, synth)
