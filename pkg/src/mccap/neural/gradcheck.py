"""Finite-difference verification of the analytic gradients.

Run models in 64-bit mode here; central differences at eps=1e-4 resolve
gradients to far better than the 1e-4 relative-error budget in that mode.
"""

import numpy as np


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(1e-6, abs(analytic), abs(numeric))
    return abs(analytic - numeric) / denom


def numeric_gradient(loss_fn, param: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of loss_fn() wrt param, perturbed in place."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        up = loss_fn()
        flat[i] = original - eps
        down = loss_fn()
        flat[i] = original
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_param_error(loss_fn, params: dict, analytic: dict,
                    eps: float = 1e-4) -> float:
    worst = 0.0
    for name, param in params.items():
        numeric = numeric_gradient(loss_fn, param, eps=eps)
        a = analytic[name].reshape(-1)
        n = numeric.reshape(-1)
        for i in range(a.size):
            worst = max(worst, relative_error(float(a[i]), float(n[i])))
    return worst


def grad_check(kind: str, params: dict, batch, eps: float = 1e-4) -> float:
    """Max relative error between analytic and numeric gradients.

    kind selects the model: "ffnn" expects batch = (images, token_lists,
    labels); "vec2seq" expects batch = (instance batch, lambda_gen) in the
    layout its loss function consumes.
    """
    if kind == "ffnn":
        from .ffnn import ffnn_loss_and_grads
        images, token_lists, labels = batch

        def loss_fn():
            return ffnn_loss_and_grads(params, images, token_lists, labels)[0]

        _, analytic = ffnn_loss_and_grads(params, images, token_lists, labels)
    elif kind == "vec2seq":
        from .encdec import vec2seq_loss_and_grads
        instances, lambda_gen = batch

        def loss_fn():
            return vec2seq_loss_and_grads(params, instances, lambda_gen)[0]

        _, analytic = vec2seq_loss_and_grads(params, instances, lambda_gen)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return max_param_error(loss_fn, params, analytic, eps=eps)
