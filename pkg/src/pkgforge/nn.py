"""Minimal feed-forward machinery with hand-written backprop.

Everything runs in float64: that is what makes the finite-difference
gradient checks meaningful and reruns bit-identical. Layers are plain
affine maps with rectifiers between them and a linear output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Mlp:
    """Affine layers with ReLU between them; the final layer stays linear."""

    def __init__(self, dims: list[int], rng: np.random.Generator | None = None):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dimensions")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        self.dims = list(dims)
        self.weights = []
        self.biases = []
        for a, b in zip(dims, dims[1:]):
            if rng is None:
                self.weights.append(np.zeros((a, b)))
                self.biases.append(np.zeros(b))
            else:
                # biases share the layer's uniform range: exact-zero biases
                # park dead units right on the rectifier kink, which breaks
                # finite-difference verification
                limit = np.sqrt(6.0 / (a + b))
                self.weights.append(rng.uniform(-limit, limit, size=(a, b)))
                self.biases.append(rng.uniform(-limit, limit, size=b))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); x is a (batch, dims[0]) array."""
        if x.shape[1] != self.dims[0]:
            raise ValueError(f"input dimension {x.shape[1]} != expected {self.dims[0]}")
        acts = [x]
        pres = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = acts[-1] @ w + b
            pres.append(pre)
            acts.append(np.maximum(pre, 0.0) if i < self.n_layers - 1 else pre)
        return acts[-1], (acts, pres)

    def backward(self, cache, grad_out: np.ndarray):
        """Returns (weight grads, bias grads, grad wrt input)."""
        acts, pres = cache
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        g = grad_out
        for i in reversed(range(self.n_layers)):
            dpre = g if i == self.n_layers - 1 else g * (pres[i] > 0)
            grads_w[i] = acts[i].T @ dpre
            grads_b[i] = dpre.sum(axis=0)
            g = dpre @ self.weights[i].T
        return grads_w, grads_b, g

    def named_params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}.w{i}"] = self.weights[i]
            out[f"{prefix}.b{i}"] = self.biases[i]
        return out

    def load_params(self, prefix: str, params: dict[str, np.ndarray]) -> None:
        for i in range(self.n_layers):
            self.weights[i][...] = params[f"{prefix}.w{i}"]
            self.biases[i][...] = params[f"{prefix}.b{i}"]


def bce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Multi-label binary cross entropy, mean over batch and classes.

    Uses the softplus identity so saturated logits never hit a log(0);
    returns (loss, dLoss/dlogits).
    """
    loss = float(np.mean(softplus(logits) - targets * logits))
    dlogits = (sigmoid(logits) - targets) / logits.size
    return loss, dlogits


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Single-label cross entropy with stable log-softmax; mean over batch."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    batch = logits.shape[0]
    loss = float(-np.mean(logp[np.arange(batch), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(batch), labels] -= 1.0
    return loss, dlogits / batch


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    scratch: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            scratch={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place Adam update with bias correction (L2-style weight decay).

    Works through per-parameter scratch buffers: the optimizer runs every
    mini-batch over every tensor, so temporary allocations dominate if left
    to numpy.
    """
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        m = state.m[name]
        v = state.v[name]
        sc = state.scratch[name]
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=sc)
        m += sc
        v *= beta2
        np.multiply(g, g, out=sc)
        sc *= 1.0 - beta2
        v += sc
        np.divide(v, bc2, out=sc)
        np.sqrt(sc, out=sc)
        sc += eps
        np.divide(m, sc, out=sc)
        sc *= lr / bc1
        p -= sc
