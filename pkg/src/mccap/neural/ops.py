"""Elementwise and dense primitives shared by both model kinds.

Everything is dtype-preserving: training runs in 32-bit, while gradient
verification re-instantiates the same parameters in 64-bit.
"""

import numpy as np


def glorot_uniform(rng, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Per-row negative log-likelihood and its gradient wrt the logits.

    Returns (losses (n,), dlogits (n,k)); dlogits is the unscaled
    softmax-minus-onehot so callers apply their own reduction weights.
    """
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    losses = -logp[rows, targets]
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return losses, dlogits
