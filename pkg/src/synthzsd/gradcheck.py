"""Finite-difference verification of every analytic gradient.

Each check draws a small random model and batch, rejects points within
``margin`` of an activation kink (hidden leaky-rectifier units, rectified
generator outputs, L1 zero crossings) and compares the analytic gradient
with ``finite_diff_grad`` over all parameters at once.
"""

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossWeights,
    critic_loss,
    diversity_loss,
    generator_adv_loss,
    gradient_penalty,
    lcs_loss,
    lcu_loss,
)
from .models import (
    ClassifierHead,
    SemanticClassifier,
    critic_backward,
    critic_cache,
    critic_forward,
    critic_input_grad,
    generator_backward,
    generator_cache,
    init_critic,
    init_generator,
)
from .numerics import RandomStream, finite_diff_grad, relative_error

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    points: int
    worst: float

    @property
    def ok(self):
        return self.worst < TOLERANCE


def _flatten(params, keys):
    return np.concatenate([np.ravel(params[k]) for k in keys])


def _unflatten(vec, template, keys):
    out, pos = {}, 0
    for k in keys:
        shape = np.shape(template[k])
        n = int(np.prod(shape, dtype=np.int64))
        out[k] = vec[pos:pos + n].reshape(shape)
        pos += n
    return out


def _compare(model, fn, grads, h):
    """Relative error between ``grads`` and central differences of ``fn(model)``."""
    keys = list(model.params())
    base = model.params()
    x0 = _flatten(base, keys)
    numeric = finite_diff_grad(lambda x: fn(model.with_params(_unflatten(x, base, keys))), x0, h)
    return relative_error(_flatten(grads, keys), numeric)


def _gen_kinks(g, w, z):
    _, A, _, O, _ = generator_cache(g, w, z)
    return min(np.abs(A).min(), np.abs(O).min())


def _critic_kinks(c, f, w):
    return np.abs(critic_cache(c, f, w)[1]).min()


class _Case:
    def __init__(self, stream, d=3, D=4, H=5, B=4, S=3, U=2):
        self.rs = stream
        self.d, self.D, self.H, self.B, self.S, self.U = d, D, H, B, S, U
        self.g = init_generator(d, D, H, stream)
        self.g = self.g.with_params({**self.g.params(), "b2": 0.3 + 0.2 * stream.normal(D)})
        self.c = init_critic(d, D, H, stream)
        self.c = self.c.with_params({**self.c.params(), "b1": 0.1 * stream.normal(H)})
        self.w = stream.normal((B, d))
        self.z = stream.normal((B, d))
        self.z2 = stream.normal((B, d))
        self.f_real = np.abs(stream.normal((B, D)))
        self.mix = stream.uniform(B)
        n = 1 + S + U
        self.head = ClassifierHead(stream.normal((n, D)), stream.normal(n), np.arange(n), np.ones(n, bool), S, U)
        self.sc = SemanticClassifier(stream.normal((d, D)), stream.normal(d), stream.normal((d, U)),
                                     np.arange(1 + S, 1 + S + U))
        self.seen_labels = 1 + stream.integers(S, B)
        self.unseen_labels = 1 + S + stream.integers(U, B)


def _check_generator_forward(k, h):
    proj = k.rs.normal((k.B, k.D))
    cache = generator_cache(k.g, k.w, k.z)
    grads = generator_backward(k.g, cache, proj)
    fn = lambda g: float(np.sum(generator_cache(g, k.w, k.z)[-1] * proj))
    return _gen_kinks(k.g, k.w, k.z), _compare(k.g, fn, grads, h)


def _check_critic_forward(k, h):
    proj = k.rs.normal(k.B)
    f = np.abs(k.rs.normal((k.B, k.D)))
    grads = critic_backward(k.c, critic_cache(k.c, f, k.w), proj)
    fn = lambda c: float(np.sum(critic_cache(c, f, k.w)[-1] * proj))
    err = _compare(k.c, fn, grads, h)
    # input gradient of the critic score
    gi = critic_input_grad(k.c, f[0], k.w[0])
    num = finite_diff_grad(lambda x: critic_forward(k.c, x, k.w[0]), f[0], h)
    return _critic_kinks(k.c, f, k.w), max(err, relative_error(gi, num))


def _check_penalty(k, h):
    f_fake = generator_cache(k.g, k.w, k.z)[-1]
    f_hat = k.mix[:, None] * k.f_real + (1 - k.mix[:, None]) * f_fake
    _, grads = gradient_penalty(k.c, k.f_real, f_fake, k.w, 10.0, k.mix)
    fn = lambda c: gradient_penalty(c, k.f_real, f_fake, k.w, 10.0, k.mix)[0]
    return _critic_kinks(k.c, f_hat, k.w), _compare(k.c, fn, grads, h)


def _check_critic_loss(k, h):
    f_fake = generator_cache(k.g, k.w, k.z)[-1]
    f_hat = k.mix[:, None] * k.f_real + (1 - k.mix[:, None]) * f_fake
    wts = LossWeights()
    _, grads, _ = critic_loss(k.c, k.f_real, f_fake, k.w, wts, k.mix)
    fn = lambda c: critic_loss(c, k.f_real, f_fake, k.w, wts, k.mix)[0]
    kink = min(_critic_kinks(k.c, f, k.w) for f in (k.f_real, f_fake, f_hat))
    return kink, _compare(k.c, fn, grads, h)


def _check_adv(k, h):
    _, grads = generator_adv_loss(k.c, k.g, k.w, k.z)
    fn = lambda g: generator_adv_loss(k.c, g, k.w, k.z)[0]
    kink = min(_gen_kinks(k.g, k.w, k.z), _critic_kinks(k.c, generator_cache(k.g, k.w, k.z)[-1], k.w))
    return kink, _compare(k.g, fn, grads, h)


def _check_lcs(k, h):
    _, grads = lcs_loss(k.g, k.head, k.w, k.seen_labels, k.z)
    fn = lambda g: lcs_loss(g, k.head, k.w, k.seen_labels, k.z)[0]
    return _gen_kinks(k.g, k.w, k.z), _compare(k.g, fn, grads, h)


def _check_lcu(k, h):
    _, grads = lcu_loss(k.g, k.sc, k.w, k.unseen_labels, k.z)
    fn = lambda g: lcu_loss(g, k.sc, k.w, k.unseen_labels, k.z)[0]
    return _gen_kinks(k.g, k.w, k.z), _compare(k.g, fn, grads, h)


def _check_div(k, h):
    _, grads = diversity_loss(k.g, k.w, k.z, k.z2)
    fn = lambda g: diversity_loss(g, k.w, k.z, k.z2)[0]
    F1 = generator_cache(k.g, k.w, k.z)[-1]
    F2 = generator_cache(k.g, k.w, k.z2)[-1]
    diff = np.abs(F1 - F2)
    # coordinates where both outputs are rectified to zero stay exactly zero
    live = (F1 > 0) | (F2 > 0)
    l1_kink = diff[live].min() if live.any() else np.inf
    kink = min(_gen_kinks(k.g, k.w, k.z), _gen_kinks(k.g, k.w, k.z2), l1_kink)
    return kink, _compare(k.g, fn, grads, h)


CHECKS = {
    "generator_forward": _check_generator_forward,
    "critic_forward": _check_critic_forward,
    "gradient_penalty": _check_penalty,
    "critic_loss": _check_critic_loss,
    "generator_adv_loss": _check_adv,
    "lcs_loss": _check_lcs,
    "lcu_loss": _check_lcu,
    "diversity_loss": _check_div,
}


def run_gradient_suite(points=100, seed=0, margin=1e-3, h=1e-6, names=None, max_tries=50):
    """Check every gradient at ``points`` kink-free random points each."""
    results = []
    for i, name in enumerate(names or CHECKS):
        stream = RandomStream(seed).spawn(i)
        check = CHECKS[name]
        worst, done = 0.0, 0
        while done < points:
            for _ in range(max_tries):
                case = _Case(stream)
                kink, err = check(case, h)
                if kink > margin:
                    break
            else:
                raise RuntimeError(f"{name}: no kink-free point after {max_tries} draws")
            worst = max(worst, err)
            done += 1
        results.append(CheckResult(name, done, worst))
    return results
