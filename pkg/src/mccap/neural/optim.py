"""Adagrad with global-norm gradient clipping, and the shared training knobs."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings shared by both trainable models."""

    lr: float = 0.01
    clip_norm: float = 4.0
    batch_size: int = 20
    max_steps: int = 50_000
    seed: int = 0
    lambda_gen: float = 0.0
    eval_every: int = 200

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0 or self.batch_size < 1:
            raise ValueError("lr, clip_norm and batch_size must be positive")
        if self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("max_steps and eval_every must be positive")
        if self.lambda_gen < 0:
            raise ValueError("lambda_gen must be non-negative")


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    return math.sqrt(total)


def clip_global_norm(grads: dict, clip_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most clip_norm.

    Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adagrad:
    """Per-parameter accumulator optimizer.

    Accumulators start at ``initial_accumulator`` rather than zero, so the
    very first update is already well-conditioned without an epsilon term.
    """

    def __init__(self, params: dict, lr: float = 0.01,
                 initial_accumulator: float = 0.1):
        if initial_accumulator <= 0:
            raise ValueError("initial_accumulator must be positive")
        self.lr = lr
        self.accumulators = {name: np.full_like(p, initial_accumulator)
                             for name, p in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            acc = self.accumulators[name]
            acc += g * g
            params[name] -= self.lr * g / np.sqrt(acc)
