"""Parameter tensors, deterministic RNG, Xavier initialization, and Adam."""

import hashlib

import numpy as np

from .errors import ConfigError


def _key_int(key) -> int:
    """Map an int or string stream key to a stable 64-bit integer."""
    if isinstance(key, str):
        return int.from_bytes(
            hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little"
        )
    return int(key)


class Rng:
    """Deterministic random source backed by numpy's PCG64.

    The same ``(seed, *keys)`` tuple yields a bit-identical draw sequence on
    every run and platform. ``keys`` (ints or strings) derive independent
    substreams (e.g. one per epoch) without correlating them.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, *keys):
        self.seed = int(seed)
        self.keys = tuple(_key_int(k) for k in keys)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys]))
        )

    def derive(self, *keys) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)


class ParamTensor:
    """One trainable matrix with its gradient and Adam moment estimates.

    ``decay`` marks the tensor as subject to L2 weight decay (weight
    matrices yes, biases no).
    """

    __slots__ = ("name", "value", "gradient", "adam_m", "adam_v", "step_count", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        if value.ndim != 2:
            raise ConfigError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.name = name
        self.value = value
        self.gradient = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0
        self.decay = decay

    def zero_grad(self):
        self.gradient[...] = 0.0

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def xavier_fill(shape, rng: Rng, fan_in=None, fan_out=None, dtype=np.float64):
    """Uniform Xavier/Glorot draw in +-sqrt(6/(fan_in+fan_out)).

    For a plain (rows, cols) matrix applied as ``W @ x`` the fans default to
    cols/rows; convolution filters pass explicit fans that include the
    kernel width.
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ConfigError(f"xavier_fill: zero-sized shape {shape}")
    fi = cols if fan_in is None else fan_in
    fo = rows if fan_out is None else fan_out
    if fi < 1 or fo < 1:
        raise ConfigError(f"xavier_fill: fans must be >= 1, got ({fi}, {fo})")
    limit = np.sqrt(6.0 / (fi + fo))
    return rng.uniform(-limit, limit, (rows, cols)).astype(dtype)


def adam_update(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, l2_weight=0.0):
    """One Adam step with bias correction over every tensor in ``params``.

    The L2 penalty is added to the raw gradient (``g + l2*value``) before
    the moment updates, and only for tensors with ``decay=True``.
    """
    if lr <= 0:
        raise ConfigError(f"adam_update: learning rate must be positive, got {lr}")
    for p in params:
        g = p.gradient
        if l2_weight and p.decay:
            g = g + l2_weight * p.value
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
