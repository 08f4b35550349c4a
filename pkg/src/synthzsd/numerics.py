"""Dense numerics shared by every learnable model.

Random numbers come from a counter-based SplitMix64 stream so that a
``(seed, counter)`` pair fully determines every draw, independent of numpy's
bit generators:

* uniform ``i`` of a stream is ``splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)``
  with ``key = splitmix64(seed)``, mapped to ``[0, 1)`` via the top 53 bits;
* Gaussians use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``.  An odd request discards the final sine, so a request
  for ``n`` normals always consumes ``2 * ceil(n / 2)`` uniforms.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidInputError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 2.0 ** -53


def _splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


class RandomStream:
    """Deterministic counter-based random source.

    ``counter`` is the number of 64-bit uniforms consumed so far.
    """

    def __init__(self, seed, counter=0):
        if seed < 0:
            raise ContractError("seed must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._key = _splitmix64(np.uint64(self.seed))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, counter={self.counter})"

    def _raw(self, n):
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _splitmix64(self._key + idx * _GOLDEN)
        self.counter += n
        return out

    def uniform(self, n, low=0.0, high=1.0):
        u = (self._raw(int(n)) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return low + (high - low) * u

    def normal(self, shape):
        """Standard normals in C order; see module docstring for draw order."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return sample_gaussian(self, n).reshape(shape)

    def integers(self, high, n):
        """``n`` integers uniform on ``[0, high)``."""
        if high <= 0:
            raise ContractError("high must be positive")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def choice(self, items, n):
        items = np.asarray(items)
        return items[self.integers(len(items), n)]

    def spawn(self, key):
        """Independent child stream identified by an integer ``key``."""
        child = _splitmix64(np.uint64(self.seed) ^ _splitmix64(np.uint64(key) + _GOLDEN))
        return RandomStream(int(child))

    def state(self):
        return self.seed, self.counter


def sample_gaussian(stream, n):
    n = int(n)
    if n < 0:
        raise ContractError("n must be non-negative")
    if n == 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = stream.uniform(2 * pairs).reshape(pairs, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = r * np.cos(theta)
    z[:, 1] = r * np.sin(theta)
    return z.reshape(-1)[:n]


def _check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"non-finite {what}")


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise InvalidInputError("softmax needs at least one logit")
    _check_finite(logits, "logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits, "logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def leaky_relu(x, slope):
    if 0.0 <= slope <= 1.0:
        return np.maximum(x, slope * x)
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            **hyper,
        )


def adam_step(params, grads, state, lr=None, beta1=None, beta2=None, eps=None):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are dicts of arrays with identical keys and
    shapes.  Returns ``(new_params, new_state)``; the inputs are not mutated.
    Hyperparameters default to those stored on ``state``.
    """
    lr = state.lr if lr is None else lr
    beta1 = state.beta1 if beta1 is None else beta1
    beta2 = state.beta2 if beta2 is None else beta2
    eps = state.eps if eps is None else eps
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractError("params, grads and optimizer state keys differ")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[k].shape != g.shape:
            raise ContractError(f"shape mismatch for {k!r}: {np.shape(p)} vs {g.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def finite_diff_grad(fn, point, h=1e-5):
    """Central-difference gradient of scalar ``fn`` at ``point`` (any shape)."""
    if h <= 0:
        raise ContractError("h must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """Max-norm relative error used by all gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
