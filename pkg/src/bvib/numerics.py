"""Dense-layer math, Adam and multiply-accumulate accounting.

Weights follow the ``y = W x + b`` convention: ``W`` has shape
``(out_dim, in_dim)``.  Batched inputs are row-major ``(M, in_dim)`` arrays,
so a batched forward is ``X @ W.T + b``.  Everything is float64.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

DTYPE = np.float64


@dataclass
class FlopCounter:
    """Multiply-accumulate tally, attributed per node id.

    A dense forward over M samples costs ``M * out_dim * in_dim`` MACs and
    its backward is booked at twice that.
    """

    forward: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    backward: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add_forward(self, node: str, macs: int) -> None:
        self.forward[node] += int(macs)

    def add_backward(self, node: str, macs: int) -> None:
        self.backward[node] += int(macs)

    @property
    def forward_flops(self) -> int:
        return sum(self.forward.values())

    @property
    def backward_flops(self) -> int:
        return sum(self.backward.values())

    def per_node(self) -> dict[str, int]:
        nodes = set(self.forward) | set(self.backward)
        return {n: self.forward.get(n, 0) + self.backward.get(n, 0) for n in sorted(nodes)}

    @property
    def total(self) -> int:
        return self.forward_flops + self.backward_flops


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """He-style uniform init: U(-a, a) with a = sqrt(6 / fan_in); zero bias."""
    if in_dim <= 0 or out_dim <= 0:
        raise ConfigError(f"layer dims must be positive, got {in_dim}->{out_dim}")
    bound = np.sqrt(6.0 / in_dim)
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(DTYPE)
    return W, np.zeros(out_dim, dtype=DTYPE)


def _macs(W: np.ndarray, x: np.ndarray) -> int:
    n = 1 if x.ndim == 1 else x.shape[0]
    return n * W.shape[0] * W.shape[1]


def dense_forward(W, b, x, counter: FlopCounter | None = None, node: str = "") -> np.ndarray:
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ConfigError(f"dense_forward shape mismatch: W{W.shape} b{b.shape} x{x.shape}")
    if counter is not None:
        counter.add_forward(node, _macs(W, x))
    return x @ W.T + b


def dense_backward(W, x, grad_out, counter: FlopCounter | None = None, node: str = ""):
    """Return ``(dW, db, dx)`` for ``y = x @ W.T + b`` given ``dL/dy``."""
    W = np.asarray(W, dtype=DTYPE)
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    g = np.atleast_2d(np.asarray(grad_out, dtype=DTYPE))
    if g.shape != (x.shape[0], W.shape[0]) or x.shape[1] != W.shape[1]:
        raise ConfigError(f"dense_backward shape mismatch: W{W.shape} x{x.shape} g{g.shape}")
    if counter is not None:
        counter.add_backward(node, 2 * _macs(W, x))
    return g.T @ x, g.sum(axis=0), g @ W


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    """Gate the upstream gradient by ``x > 0`` (subgradient 0 at the kink)."""
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0)


def softmax_log_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``param`` in place.

    ``state`` is advanced in place too; the updated ``param`` is returned for
    convenience.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grad = np.asarray(grad, dtype=DTYPE)
    if grad.shape != param.shape:
        raise ConfigError(f"adam_step shape mismatch: param{param.shape} grad{grad.shape}")
    check_finite(grad, "gradient")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param
