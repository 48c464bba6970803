"""A small fixed-operator neural network engine with hand-written adjoints.

Arrays are plain float64 numpy arrays.  Every differentiable op comes as a
forward that returns a cache and a backward that consumes it; models compose
these by hand.  There is no tape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")


def check_finite(*arrays, what="value"):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what} encountered")


@dataclass
class MlpParams:
    """Dense layers applied along the last axis; weights are (d_in, d_out)."""

    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations differ in length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: bias {b.shape} vs weight {W.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {i}: input width {W.shape[0]} does not chain")

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activations)

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights],
                         [b.copy() for b in self.biases], self.activations)


def init_mlp(widths, rng, hidden="relu", last="identity", last_scale=1.0) -> MlpParams:
    """He-normal weights, zero biases.  ``widths`` lists every layer width."""
    weights, biases, acts = [], [], []
    nl = len(widths) - 1
    for i in range(nl):
        std = np.sqrt(2.0 / widths[i])
        if i == nl - 1:
            std *= last_scale
        weights.append(rng.normal(0.0, std, size=(widths[i], widths[i + 1])))
        biases.append(np.zeros(widths[i + 1]))
        acts.append(last if i == nl - 1 else hidden)
    return MlpParams(weights, biases, tuple(acts))


@dataclass
class MlpCache:
    lead: tuple
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"input width {x.shape[-1]} != {params.d_in}")
    lead = x.shape[:-1]
    h = x.reshape(-1, params.d_in)
    cache = MlpCache(lead)
    for W, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        z = h @ W + b
        cache.preacts.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    check_finite(h, what="activation")
    return h.reshape(*lead, params.d_out), cache


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, cache: MlpCache, dy: np.ndarray, need_input=True):
    """Returns (dx, grads) with grads shaped like ``params``.

    Rows with an all-zero upstream gradient contribute nothing, so when most
    rows are zero (typical below a max-pool) they are dropped up front.
    """
    g = np.asarray(dy, dtype=np.float64).reshape(-1, params.d_out)
    nrows = g.shape[0]
    rows = None
    if nrows > 64:
        live = np.flatnonzero(np.any(g != 0.0, axis=1))
        if live.size < nrows // 2:
            rows = live
            g = g[rows]
    gw, gb = [], []
    for i in reversed(range(len(params.weights))):
        z = cache.preacts[i]
        h = cache.inputs[i]
        if rows is not None:
            z, h = z[rows], h[rows]
        if params.activations[i] == "relu":
            g = g * (z > 0.0)
        gw.append(h.T @ g)
        gb.append(g.sum(axis=0))
        if i or need_input:
            g = g @ params.weights[i].T
    grads = MlpParams(gw[::-1], gb[::-1], params.activations)
    check_finite(*grads.arrays(), what="gradient")
    if not need_input:
        return None, grads
    if rows is not None:
        full = np.zeros((nrows, params.d_in))
        full[rows] = g
        g = full
    check_finite(g, what="gradient")
    return g.reshape(*cache.lead, params.d_in), grads


def max_pool(x: np.ndarray, axis: int):
    """Max along ``axis``; argmax keeps the lowest index on ties."""
    x = np.asarray(x)
    if x.shape[axis] < 1:
        raise ShapeError("max_pool over an empty axis")
    arg = np.argmax(x, axis=axis)
    vals = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    return vals, arg


def max_pool_backward(dy: np.ndarray, argmax: np.ndarray, shape, axis: int) -> np.ndarray:
    axis = axis % len(shape)
    dx = np.zeros(shape)
    np.put_along_axis(dx, np.expand_dims(argmax, axis), np.expand_dims(dy, axis), axis=axis)
    return dx


# --- parameter collections -------------------------------------------------
#
# A model is a dict name -> MlpParams.  Gradients share the structure.


def flat_arrays(model: dict) -> list:
    return [a for name in sorted(model) for a in model[name].arrays()]


def zeros_like_model(model: dict) -> dict:
    return {k: v.zeros_like() for k, v in model.items()}


def copy_model(model: dict) -> dict:
    return {k: v.copy() for k, v in model.items()}


def add_into(acc: dict, grads: dict, scale=1.0):
    for name, g in grads.items():
        for a, b in zip(acc[name].arrays(), g.arrays()):
            a += scale * b
    return acc


def checksum(model: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(model):
        h.update(name.encode())
        for a in model[name].arrays():
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: dict, lr=1e-3, **kw) -> "AdamState":
        arrays = flat_arrays(model)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_update(model: dict, grads: dict, state: AdamState):
    """One Adam step, in place.  Returns (model, state)."""
    params = flat_arrays(model)
    gs = flat_arrays(grads)
    if len(params) != len(gs) or len(params) != len(state.m):
        raise ShapeError("parameter/gradient/state counts differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, gs, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def numeric_grad(f, x: np.ndarray, step=1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = range(x.size) if index is None else index
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in it:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor=1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def pointnet_forward(params: MlpParams, X: np.ndarray):
    """Shared per-point MLP then max over the point axis: (B, n, d) -> (B, f)."""
    feats, mcache = mlp_forward(params, X)
    pooled, arg = max_pool(feats, axis=-2)
    return pooled, (mcache, arg, feats.shape)


def pointnet_backward(params: MlpParams, cache, dpooled: np.ndarray, need_input=False):
    mcache, arg, shape = cache
    dfeats = max_pool_backward(dpooled, arg, shape, axis=-2)
    return mlp_backward(params, mcache, dfeats, need_input=need_input)
