"""Loss terms of the unified generator objective with analytic gradients.

Every function returns ``(value, grads)`` where ``grads`` is a dict keyed
like the parameters of the model being trained (critic for the critic
terms, generator for everything else).  Frozen models never receive
gradients.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError, DegenerateInputError
from .models import (
    classifier_logits,
    critic_backward,
    critic_cache,
    generator_backward,
    generator_cache,
    semantic_logits,
)
from .numerics import leaky_relu_grad, log_softmax, softmax

NORM_EPS = 1e-12
NOISE_PAIR_MIN_L1 = 1e-9


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.1
    alpha3: float = 0.1
    alpha4: float = 1.0
    gp_lambda: float = 10.0
    warmup_epochs: int = 5
    div_sign: float = -1.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "div_sign" and getattr(self, f.name) < 0:
                raise ContractError(f"{f.name} must be non-negative")
        if self.div_sign not in (-1.0, 1.0):
            raise ContractError("div_sign must be +1 or -1")


@dataclass
class LossReport:
    """Per-term values for one generator step.

    ``wgan`` is the Wasserstein estimate ``mean D(real) - mean D(fake)`` from
    the last critic step; ``adv`` is the generator's adversarial term.
    """

    step: int
    wgan: float
    penalty: float
    adv: float
    lcs: float
    lcu: float
    div: float
    gen_total: float
    critic_total: float

    COLUMNS = ("step", "wgan", "penalty", "lcs", "lcu", "div", "gen_total", "critic_total")

    def row(self):
        return "\t".join(
            str(self.step) if c == "step" else f"{getattr(self, c):.9g}" for c in self.COLUMNS
        )


def _check_batch(*arrays):
    n = len(arrays[0])
    if n == 0:
        raise ContractError("empty batch")
    if any(len(a) != n for a in arrays):
        raise ContractError("batch arrays are not aligned")


def draw_mix(stream, n, distribution="uniform"):
    """Interpolation coefficients for the gradient penalty."""
    if distribution == "uniform":
        return stream.uniform(n)
    if distribution == "normal":
        return stream.normal(n)
    raise ContractError(f"unknown penalty mix distribution {distribution!r}")


def draw_noise_pairs(stream, n, d, max_redraws=16):
    """Independent noise pairs with L1 separation above ``NOISE_PAIR_MIN_L1``."""
    z1 = stream.normal((n, d))
    z2 = stream.normal((n, d))
    for _ in range(max_redraws):
        bad = np.abs(z1 - z2).sum(1) <= NOISE_PAIR_MIN_L1
        if not bad.any():
            return z1, z2
        z2[bad] = stream.normal((int(bad.sum()), d))
    raise DegenerateInputError("coincident noise pair after re-draw budget")


def gradient_penalty(c, f_real, f_fake, w, lam, mix):
    """``lam * mean((||grad_f D(f_hat, w)|| - 1)^2)`` and its critic gradients.

    ``mix`` holds one interpolation coefficient per pair; ``f_hat = mix * f_real
    + (1 - mix) * f_fake``.  The leaky-rectifier second derivative is zero
    almost everywhere, so only ``W1`` (feature block) and ``w2`` get gradients.
    """
    f_real = np.atleast_2d(np.asarray(f_real, dtype=np.float64))
    f_fake = np.atleast_2d(np.asarray(f_fake, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    mix = np.asarray(mix, dtype=np.float64).reshape(-1)
    _check_batch(f_real, f_fake, w, mix)
    if f_real.shape[1] != c.D or f_fake.shape[1] != c.D:
        raise ContractError("feature dimension mismatch")
    B = len(f_real)
    f_hat = mix[:, None] * f_real + (1.0 - mix[:, None]) * f_fake
    _, A, _, _ = critic_cache(c, f_hat, w)
    S = leaky_relu_grad(A, c.slope)  # B x H
    V = S * c.w2  # B x H
    W1f = c.W1[:, : c.D]
    G = V @ W1f  # B x D
    norm = np.sqrt((G * G).sum(1) + NORM_EPS)
    value = lam * np.mean((norm - 1.0) ** 2)
    U = (2.0 * lam / B) * ((norm - 1.0) / norm)[:, None] * G  # dP/dG
    gW1 = np.zeros_like(c.W1)
    gW1[:, : c.D] = V.T @ U
    gw2 = (S * (U @ W1f.T)).sum(0)
    grads = {"W1": gW1, "b1": np.zeros_like(c.b1), "w2": gw2, "b2": np.zeros(())}
    return float(value), grads


def critic_loss(c, f_real, f_fake, w, weights, mix):
    """Critic descent objective ``-(mean D(real) - mean D(fake)) + penalty``.

    Returns ``(value, grads, (wgan_estimate, penalty))``.
    """
    f_real = np.atleast_2d(np.asarray(f_real, dtype=np.float64))
    f_fake = np.atleast_2d(np.asarray(f_fake, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    _check_batch(f_real, f_fake, w)
    B = len(f_real)
    cache_r = critic_cache(c, f_real, w)
    cache_f = critic_cache(c, f_fake, w)
    wgan = float(cache_r[-1].mean() - cache_f[-1].mean())
    gr = critic_backward(c, cache_r, np.full(B, -1.0 / B))
    gf = critic_backward(c, cache_f, np.full(B, 1.0 / B))
    pen, gp = gradient_penalty(c, f_real, f_fake, w, weights.gp_lambda, mix)
    grads = {k: gr[k] + gf[k] + gp[k] for k in gr}
    return -wgan + pen, grads, (wgan, pen)


def _critic_dfeature(c, cache):
    _, A, _, _ = cache
    return (leaky_relu_grad(A, c.slope) * c.w2) @ c.W1[:, : c.D]


def generator_adv_loss(c, g, w, z):
    """``-mean D(G(w, z), w)``; gradients for the generator only."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    _check_batch(w, z)
    B = len(w)
    gcache = generator_cache(g, w, z)
    ccache = critic_cache(c, gcache[-1], w)
    value = -float(ccache[-1].mean())
    dF = -_critic_dfeature(c, ccache) / B
    return value, generator_backward(g, gcache, dF)


def _cross_entropy(logits, targets):
    B = len(targets)
    logp = log_softmax(logits)
    value = -float(logp[np.arange(B), targets].mean())
    dlogits = softmax(logits)
    dlogits[np.arange(B), targets] -= 1.0
    return value, dlogits / B


def lcs_loss(g, head, w, labels, z):
    """Seen-class log-likelihood of synthesized features under the frozen head.

    Active rows are background plus seen rows.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    _check_batch(w, z, labels)
    rows = head.rows_for("seen")
    pos = {int(head.class_ids[r]): i for i, r in enumerate(rows) if r != 0}
    try:
        targets = np.array([pos[int(y)] for y in labels])
    except KeyError as e:
        raise ContractError(f"label {e.args[0]} is not a seen class") from None
    gcache = generator_cache(g, w, z)
    value, dlogits = _cross_entropy(classifier_logits(head, gcache[-1], rows), targets)
    dF = dlogits @ head.W[rows]
    return value, generator_backward(g, gcache, dF)


def lcu_loss(g, sc_unseen, w, labels, z):
    """Unseen-class log-likelihood under the semantic classifier attached to W_u."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    _check_batch(w, z, labels)
    pos = {int(cid): i for i, cid in enumerate(sc_unseen.class_ids)}
    try:
        targets = np.array([pos[int(y)] for y in labels])
    except KeyError as e:
        raise ContractError(f"label {e.args[0]} is not an unseen class") from None
    gcache = generator_cache(g, w, z)
    value, dlogits = _cross_entropy(semantic_logits(sc_unseen, gcache[-1]), targets)
    dF = (dlogits @ sc_unseen.semantics.T) @ sc_unseen.W_fc
    return value, generator_backward(g, gcache, dF)


def diversity_loss(g, w, z1, z2):
    """Mean ratio ``||G(w,z1) - G(w,z2)||_1 / ||z1 - z2||_1`` over pairs.

    The L1 subgradient at zero coordinates is taken as 0.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    _check_batch(w, z1, z2)
    B = len(w)
    dz = np.abs(z1 - z2).sum(1)
    if np.any(dz <= NOISE_PAIR_MIN_L1):
        raise DegenerateInputError("noise pair with (near-)zero L1 distance")
    c1 = generator_cache(g, w, z1)
    c2 = generator_cache(g, w, z2)
    diff = c1[-1] - c2[-1]
    value = float(np.mean(np.abs(diff).sum(1) / dz))
    dF1 = np.sign(diff) / (B * dz[:, None])
    g1 = generator_backward(g, c1, dF1)
    g2 = generator_backward(g, c2, -dF1)
    return value, {k: g1[k] + g2[k] for k in g1}


def _zero_like_grads(template):
    return {k: np.zeros_like(v) for k, v in template.items()}


def generator_total_loss(terms, weights, epoch):
    """Weighted recombination of generator terms.

    ``terms`` maps ``"adv"``, ``"lcs"``, ``"lcu"``, ``"div"`` to ``(value, grads)``;
    missing terms count as zero.  The unseen term is gated off for
    ``epoch < weights.warmup_epochs``.  Returns ``(value, grads, coefficients)``.
    """
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    coeff = {
        "adv": weights.alpha1,
        "lcs": weights.alpha2,
        "lcu": weights.alpha3 if epoch >= weights.warmup_epochs else 0.0,
        "div": weights.div_sign * weights.alpha4,
    }
    template = next((t[1] for t in terms.values() if t is not None), None)
    value = 0.0
    grads = _zero_like_grads(template) if template is not None else {}
    for name, (v, gr) in ((k, t) for k, t in terms.items() if t is not None):
        a = coeff[name]
        if a == 0.0:
            continue
        value += a * v
        for k in grads:
            grads[k] = grads[k] + a * gr[k]
    return value, grads, coeff
