"""A single gated recurrent cell: batched forward step and its exact backward.

Parameter names follow the gate structure: w_* multiply the input, u_* the
previous state, b_* are biases, for the update gate (z), reset gate (r) and
candidate state (h).
"""

import numpy as np

from .ops import glorot_uniform, sigmoid

GATE_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def init_gru_params(rng, d_in: int, d_hidden: int, dtype, prefix: str = "") -> dict:
    params = {}
    for gate in ("z", "r", "h"):
        params[f"{prefix}w_{gate}"] = glorot_uniform(rng, d_in, d_hidden,
                                                     (d_in, d_hidden), dtype)
        params[f"{prefix}u_{gate}"] = glorot_uniform(rng, d_hidden, d_hidden,
                                                     (d_hidden, d_hidden), dtype)
        params[f"{prefix}b_{gate}"] = np.zeros(d_hidden, dtype=dtype)
    return params


def gru_forward(params: dict, x: np.ndarray, h: np.ndarray, prefix: str = ""):
    """One step for a batch: returns (new_state, cache-for-backward)."""
    p = {name: params[prefix + name] for name in GATE_NAMES}
    z = sigmoid(x @ p["w_z"] + h @ p["u_z"] + p["b_z"])
    r = sigmoid(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    h_cand = np.tanh(x @ p["w_h"] + (r * h) @ p["u_h"] + p["b_h"])
    h_new = (1.0 - z) * h + z * h_cand
    cache = (x, h, z, r, h_cand)
    return h_new, cache


def gru_backward(params: dict, cache, dh_new: np.ndarray,
                 grads: dict, prefix: str = ""):
    """Backprop one step; accumulates into grads, returns (dx, dh_prev)."""
    x, h, z, r, h_cand = cache
    p = {name: params[prefix + name] for name in GATE_NAMES}

    dz = dh_new * (h_cand - h)
    dh_cand = dh_new * z
    dh = dh_new * (1.0 - z)

    da_h = dh_cand * (1.0 - h_cand * h_cand)
    d_rh = da_h @ p["u_h"].T
    dr = d_rh * h
    dh += d_rh * r

    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    dh += da_z @ p["u_z"].T + da_r @ p["u_r"].T

    dx = da_z @ p["w_z"].T + da_r @ p["w_r"].T + da_h @ p["w_h"].T

    grads[prefix + "w_z"] += x.T @ da_z
    grads[prefix + "u_z"] += h.T @ da_z
    grads[prefix + "b_z"] += da_z.sum(axis=0)
    grads[prefix + "w_r"] += x.T @ da_r
    grads[prefix + "u_r"] += h.T @ da_r
    grads[prefix + "b_r"] += da_r.sum(axis=0)
    grads[prefix + "w_h"] += x.T @ da_h
    grads[prefix + "u_h"] += (r * h).T @ da_h
    grads[prefix + "b_h"] += da_h.sum(axis=0)
    return dx, dh
