"""Tiny per-modality classifiers with hand-written backward passes.

Parameters are flat dicts of float64 arrays keyed like ``l0.W`` / ``l0.gamma``
/ ``cls.W`` so EMA, optimizer state and gradient masking stay trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5

Params = dict


def init_mlp_params(dim_in: int, dim_out: int, hidden=(32, 32), seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    d = dim_in
    for i, h in enumerate(hidden):
        params[f"l{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h))
        params[f"l{i}.b"] = np.zeros(h)
        params[f"l{i}.gamma"] = np.ones(h)
        params[f"l{i}.beta"] = np.zeros(h)
        d = h
    params["cls.W"] = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, dim_out))
    params["cls.b"] = np.zeros(dim_out)
    return params


def n_hidden_layers(params: Params) -> int:
    return sum(1 for k in params if k.endswith(".W") and k.startswith("l"))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: Params, x: np.ndarray):
    """Affine -> layer norm -> ReLU per hidden layer, then linear + softmax.

    Returns (probs, cache); the cache keeps every intermediate needed by
    :func:`backward`, including the last hidden activation under ``hidden``.
    """
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    h = np.asarray(x, dtype=np.float64)
    layers = []
    for i in range(n_hidden_layers(params)):
        a = h @ params[f"l{i}.W"] + params[f"l{i}.b"]
        mu = a.mean(axis=1, keepdims=True)
        var = a.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (a - mu) * inv
        y = params[f"l{i}.gamma"] * xhat + params[f"l{i}.beta"]
        out = np.maximum(y, 0.0)
        layers.append({"in": h, "xhat": xhat, "inv": inv, "y": y})
        h = out
    logits = h @ params["cls.W"] + params["cls.b"]
    probs = softmax(logits)
    if not np.isfinite(probs).all():
        raise ValueError("non-finite activation")
    cache = {"layers": layers, "hidden": h, "probs": probs, "params": params}
    return probs, cache


def probs_grad_to_logits(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def backward(cache, dprobs=None, dlogits=None, dhidden=None, scope: str = "all") -> Params:
    """Analytic parameter gradients for the cached forward pass.

    Gradients may be injected at the probabilities, the logits and/or the
    last hidden activation (used by the feature-clustering objective).
    ``scope="norm_only"`` zeroes everything except the normalization affine
    parameters.
    """
    params = cache["params"]
    probs = cache["probs"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    n_layers = len(cache["layers"])

    dlog = np.zeros_like(probs)
    if dprobs is not None:
        dlog += probs_grad_to_logits(probs, dprobs)
    if dlogits is not None:
        dlog += dlogits

    h = cache["hidden"]
    grads["cls.W"] = h.T @ dlog
    grads["cls.b"] = dlog.sum(axis=0)
    dh = dlog @ params["cls.W"].T
    if dhidden is not None:
        dh = dh + dhidden

    for i in range(n_layers - 1, -1, -1):
        layer = cache["layers"][i]
        dy = dh * (layer["y"] > 0)
        grads[f"l{i}.gamma"] = (dy * layer["xhat"]).sum(axis=0)
        grads[f"l{i}.beta"] = dy.sum(axis=0)
        dxhat = dy * params[f"l{i}.gamma"]
        # Layer-norm backward over the feature axis.
        d = dxhat.shape[1]
        inv = layer["inv"]
        xhat = layer["xhat"]
        da = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        grads[f"l{i}.W"] = layer["in"].T @ da
        grads[f"l{i}.b"] = da.sum(axis=0)
        dh = da @ params[f"l{i}.W"].T

    if scope == "norm_only":
        for k in grads:
            if not (k.endswith(".gamma") or k.endswith(".beta")):
                grads[k] = np.zeros_like(grads[k])
    elif scope != "all":
        raise ValueError(f"unknown update scope {scope!r}")
    return grads


@dataclass
class ModelPair:
    """Student and EMA teacher parameter sets for one modality."""

    student: Params
    teacher: Params
    modality: str = ""

    @staticmethod
    def fresh(dim_in: int, dim_out: int, seed: int = 0, modality: str = "") -> "ModelPair":
        student = init_mlp_params(dim_in, dim_out, seed=seed)
        return ModelPair(student=student, teacher=clone_params(student), modality=modality)

    def clone(self) -> "ModelPair":
        return ModelPair(clone_params(self.student), clone_params(self.teacher), self.modality)


def clone_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def ema_update(pair: ModelPair, lambda_s: float) -> None:
    """teacher <- lambda_s * teacher + (1 - lambda_s) * student, in place."""
    for k in pair.teacher:
        pair.teacher[k] = lambda_s * pair.teacher[k] + (1.0 - lambda_s) * pair.student[k]


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over parameter dicts."""

    def __init__(self, lr: float = 6e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        self.step_count += 1
        t = self.step_count
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {k}")
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** t)
            vhat = self.v[k] / (1 - self.beta2 ** t)
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * params[k]
            params[k] = params[k] - self.lr * update
            if not np.isfinite(params[k]).all():
                raise FloatingPointError(f"non-finite update for {k}")
