"""Dense network kernel: FFN, softmax cross-entropy, Adam, gradient checking, RNG streams.

Every array is float64. Parameters are kept in flat ``dict[str, np.ndarray]``
containers so optimizers, checkpoints and gradient checks can treat all
trainable modules uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


class TrainingError(RuntimeError):
    """Raised on non-finite losses or gradients during optimization."""


# ----------------------------------------------------------------------
# Random streams
# ----------------------------------------------------------------------


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Streams are derived through ``numpy.random.SeedSequence`` so a stream's
    draws depend only on its key, never on how many other streams were
    consumed before it.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self, a: float = 0.0, b: float = 1.0, size=None):
        return self.gen.uniform(a, b, size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        return self.gen.normal(mean, std, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on ``[low, high)``."""
        return self.gen.integers(low, high, size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        if k > n:
            raise ValueError(f"cannot draw {k} items without replacement from {n}")
        return self.gen.choice(n, size=k, replace=False)

    def child(self, stream_id: int) -> "RngStream":
        """Independent stream derived from this stream's seed and a sub-id."""
        return RngStream(self.seed, (self.stream_id * 1_000_003 + int(stream_id) + 1) & 0xFFFFFFFFFFFFFFFF)


def seeded_rng(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


# ----------------------------------------------------------------------
# Feed-forward network
# ----------------------------------------------------------------------


@dataclass
class FfnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ShapeError("FFN weights must be matrices")
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise ShapeError(
                f"inconsistent FFN shapes w1={self.w1.shape} b1={self.b1.shape} w2={self.w2.shape}"
            )
        if self.b2.shape != (self.w2.shape[1],):
            raise ShapeError(f"b2 shape {self.b2.shape} does not match w2 {self.w2.shape}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def as_dict(self, prefix: str = "") -> Params:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1, f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    @classmethod
    def from_dict(cls, d: Params, prefix: str = "") -> "FfnParams":
        return cls(d[f"{prefix}w1"], d[f"{prefix}b1"], d[f"{prefix}w2"], d[f"{prefix}b2"])


def linear_init(fan_in: int, fan_out: int, rng: RngStream) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(DTYPE)


def init_ffn(in_dim: int, hidden: int, out_dim: int, rng: RngStream, zero_last: bool = False) -> FfnParams:
    w2 = np.zeros((hidden, out_dim)) if zero_last else linear_init(hidden, out_dim, rng)
    return FfnParams(linear_init(in_dim, hidden, rng), np.zeros(hidden), w2, np.zeros(out_dim))


def ffn_forward(x: np.ndarray, p: FfnParams) -> np.ndarray:
    """``max(0, x W1 + b1) W2 + b2`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != FFN in_dim {p.in_dim}")
    return np.maximum(0.0, x @ p.w1 + p.b1) @ p.w2 + p.b2


def ffn_backward(x: np.ndarray, p: FfnParams, upstream_grad: np.ndarray) -> tuple[np.ndarray, FfnParams]:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != FFN in_dim {p.in_dim}")
    g = np.asarray(upstream_grad, dtype=DTYPE)
    if g.shape != x.shape[:-1] + (p.out_dim,):
        raise ShapeError(f"upstream grad shape {g.shape} does not match output {x.shape[:-1] + (p.out_dim,)}")
    pre = x @ p.w1 + p.b1
    hid = np.maximum(0.0, pre)
    x2 = x.reshape(-1, p.in_dim)
    h2 = hid.reshape(-1, hid.shape[-1])
    g2 = g.reshape(-1, p.out_dim)
    grad_w2 = h2.T @ g2
    grad_b2 = g2.sum(axis=0)
    dpre = (g2 @ p.w2.T) * (pre.reshape(h2.shape) > 0)
    grad_w1 = x2.T @ dpre
    grad_b1 = dpre.sum(axis=0)
    grad_x = (dpre @ p.w1.T).reshape(x.shape)
    return grad_x, FfnParams(grad_w1, grad_b1, grad_w2, grad_b2)


# ----------------------------------------------------------------------
# Softmax cross-entropy
# ----------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Loss and logit gradient for a single categorical target."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= int(target) < logits.shape[-1]:
        raise IndexError(f"target {target} outside vocabulary of size {logits.shape[-1]}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[int(target)] -= 1.0
    return float(-lp[int(target)]), grad


def batched_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all leading positions, with gradient w.r.t. ``logits``."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    if t.min() < 0 or t.max() >= V:
        raise IndexError("target index outside vocabulary")
    lp = log_softmax(flat)
    n = flat.shape[0]
    loss = -lp[np.arange(n), t].mean()
    grad = np.exp(lp)
    grad[np.arange(n), t] -= 1.0
    grad /= n
    return float(loss), grad.reshape(logits.shape)


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """Bias-corrected Adam update over the keys present in ``grads``.

    Parameters without a gradient entry are passed through untouched, which
    is how frozen modules are expressed.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, g in grads.items():
        m = new_m.get(name, np.zeros_like(g))
        v = new_v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        with np.errstate(over="ignore", invalid="ignore"):
            v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            upd = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(upd))):
            raise TrainingError(f"Adam update for parameter {name!r} overflowed")
        new_params[name] = upd
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


# ----------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    epsilon: float = 1e-5,
    names: list[str] | None = None,
) -> float:
    """Max of ``|g_analytic - g_fd| / max(1, |g_fd|)`` over every parameter entry.

    ``loss_fn`` returns ``(loss, grads)``; names missing from ``grads`` are
    treated as having analytic gradient zero.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-8, 1e-3]")
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise TrainingError("non-finite loss at the evaluation point")
    worst = 0.0
    for name in names if names is not None else sorted(params):
        base = params[name]
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += epsilon
            minus = base.copy()
            minus[idx] -= epsilon
            lp, _ = loss_fn({**params, name: plus})
            lm, _ = loss_fn({**params, name: minus})
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise TrainingError(f"non-finite loss while perturbing {name}{idx}")
            fd = (lp - lm) / (2.0 * epsilon)
            err = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
