"""Minimal dense-layer machinery shared by the predictor and the score networks.

Parameters live in flat name -> float64 ndarray dicts so the optimizer,
serialization and copying stay generic. MLPs are linear stacks with tanh
between layers and a linear output; forward passes cache what the hand-written
backward passes need.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from .errors import ParseError

ParamDict = dict[str, np.ndarray]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def init_mlp(params: ParamDict, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Add weights for an MLP with the given layer sizes under ``prefix``."""
    for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = glorot(rng, din, dout)
        params[f"{prefix}.b{i}"] = np.zeros(dout)


def mlp_depth(params: Mapping[str, np.ndarray], prefix: str) -> int:
    d = 0
    while f"{prefix}.w{d}" in params:
        d += 1
    return d


def mlp_forward(params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray):
    """Forward pass; returns (output, cache). tanh between layers, linear output."""
    depth = mlp_depth(params, prefix)
    inputs = []
    h = x
    for i in range(depth):
        inputs.append(h)
        h = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < depth - 1:
            h = np.tanh(h)
    return h, inputs


def mlp_backward(
    params: Mapping[str, np.ndarray],
    prefix: str,
    inputs: list[np.ndarray],
    grad_out: np.ndarray,
    grads: ParamDict | None = None,
):
    """Backward pass; accumulates parameter grads into ``grads`` (if given)
    and returns the gradient w.r.t. the MLP input."""
    depth = len(inputs)
    g = grad_out
    for i in reversed(range(depth)):
        h_in = inputs[i]
        if i < depth - 1:
            # recompute the tanh output of layer i feeding layer i+1
            act = inputs[i + 1]
            g = g * (1.0 - act * act)
        if grads is not None:
            w_key, b_key = f"{prefix}.w{i}", f"{prefix}.b{i}"
            flat_h = h_in.reshape(-1, h_in.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            grads[w_key] = grads.get(w_key, 0.0) + flat_h.T @ flat_g
            grads[b_key] = grads.get(b_key, 0.0) + flat_g.sum(axis=0)
        g = g @ params[f"{prefix}.w{i}"].T
    return g


class Adam:
    """Standard Adam over a parameter dict; state keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: ParamDict = {}
        self.v: ParamDict = {}
        self.t = 0

    def step(self, params: ParamDict, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for key, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            self.m[key] = b1 * self.m.get(key, 0.0) + (1 - b1) * g
            self.v[key] = b2 * self.v.get(key, 0.0) + (1 - b2) * g * g
            m_hat = self.m[key] / corr1
            v_hat = self.v[key] / corr2
            params[key] = params[key] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def copy_params(params: Mapping[str, np.ndarray]) -> ParamDict:
    return {k: np.array(v, dtype=np.float64) for k, v in params.items()}


def params_to_json(params: Mapping[str, np.ndarray], meta: dict, format_version: int = 1) -> str:
    payload = {
        "format_version": format_version,
        "meta": meta,
        "params": {k: np.asarray(v).tolist() for k, v in params.items()},
    }
    return json.dumps(payload)


def params_from_json(text: str) -> tuple[ParamDict, dict]:
    try:
        payload = json.loads(text)
        if "format_version" not in payload:
            raise KeyError("format_version")
        params = {k: np.asarray(v, dtype=np.float64) for k, v in payload["params"].items()}
        return params, payload.get("meta", {})
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"invalid checkpoint: {exc}") from exc
