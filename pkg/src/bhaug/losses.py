"""Chamfer distance, orientation-invariant symmetry loss, cross-entropy and
prototype regularizers.  Each ``*_grad`` variant also returns gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .geometry import pairwise_sq_dists

UP_AXIS = 1  # y
MIRROR_AXIS = 0  # mirror plane x = 0


def _as_points(P) -> np.ndarray:
    P = np.asarray(getattr(P, "points", P), dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ShapeError(f"expected a nonempty n x d cloud, got shape {P.shape}")
    return P


def chamfer_grad(P1, P2):
    """Symmetric sum of squared nearest-neighbor distances and its gradients.

    Nearest neighbors break ties toward the lowest index; the gradient flows
    through that single pair.
    """
    A, B = _as_points(P1), _as_points(P2)
    d2 = pairwise_sq_dists(A, B)
    ia = np.argmin(d2, axis=1)  # for each a, nearest b
    ib = np.argmin(d2, axis=0)  # for each b, nearest a
    da = d2[np.arange(A.shape[0]), ia]
    db = d2[ib, np.arange(B.shape[0])]
    value = math.fsum(np.concatenate([da, db]))

    ga = 2.0 * (A - B[ia])
    gb = np.zeros_like(B)
    np.add.at(gb, ia, -ga)
    diff = 2.0 * (B - A[ib])
    gb += diff
    np.add.at(ga, ib, -diff)
    return value, ga, gb


def chamfer(P1, P2) -> float:
    A, B = _as_points(P1), _as_points(P2)
    d2 = pairwise_sq_dists(A, B)
    return math.fsum(np.concatenate([d2.min(axis=1), d2.min(axis=0)]))


@dataclass(frozen=True)
class RotationSet:
    """v angles k*pi/v about the up axis."""

    v: int = 2

    def __post_init__(self):
        if self.v < 1:
            raise ValueError("need at least one rotation")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.v) * (np.pi / self.v)


def rotation_matrix(angle: float, axis: int = UP_AXIS) -> np.ndarray:
    """Right-handed rotation about a coordinate axis; apply as ``P @ R.T``."""
    c, s = math.cos(angle), math.sin(angle)
    if angle == 0.0:
        c, s = 1.0, 0.0
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def rotate(P: np.ndarray, angle: float, axis: int = UP_AXIS) -> np.ndarray:
    if angle == 0.0:
        return np.array(P, dtype=np.float64)
    return P @ rotation_matrix(angle, axis).T


def mirror(P: np.ndarray, axis: int = MIRROR_AXIS) -> np.ndarray:
    Q = np.array(P, dtype=np.float64)
    Q[:, axis] = -Q[:, axis]
    return Q


def symmetry_loss_grad(P, rots: RotationSet | int = 2, up=UP_AXIS, mirror_axis=MIRROR_AXIS):
    """min over rotation frames of chamfer(mirror(rot(P)), rot(P)).

    Gradient flows through the first frame attaining the minimum.
    """
    P = _as_points(P)
    if isinstance(rots, int):
        rots = RotationSet(rots)
    best = None
    for angle in rots.angles:
        Q = rotate(P, angle, up)
        val = chamfer(mirror(Q, mirror_axis), Q)
        if best is None or val < best[0]:
            best = (val, angle, Q)
    val, angle, Q = best
    _, g_mir, g_q = chamfer_grad(mirror(Q, mirror_axis), Q)
    gQ = g_q + mirror(g_mir, mirror_axis)
    gP = gQ @ rotation_matrix(angle, up) if angle != 0.0 else gQ
    return val, gP


def symmetry_loss(P, rots: RotationSet | int = 2, up=UP_AXIS, mirror_axis=MIRROR_AXIS) -> float:
    P = _as_points(P)
    if isinstance(rots, int):
        rots = RotationSet(rots)
    vals = []
    for angle in rots.angles:
        Q = rotate(P, angle, up)
        vals.append(chamfer(mirror(Q, mirror_axis), Q))
    return min(vals)


def _check_labels(logits, y):
    y = np.asarray(y)
    k = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range for {k} classes: {y}")


def cross_entropy_grad(logits, y):
    """-log softmax(logits)[y].  Accepts a single vector or a batch (B, k).

    For a batch returns per-sample losses and per-sample gradients (not averaged).
    """
    z = np.asarray(logits, dtype=np.float64)
    _check_labels(z, y)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    y2 = np.atleast_1d(np.asarray(y))
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[np.arange(z2.shape[0]), y2]
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(z2.shape[0]), y2] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def cross_entropy(logits, y):
    return cross_entropy_grad(logits, y)[0]


def prototype_regularizers_grad(M):
    """(ortho, sparsity, d_ortho, d_sparsity) for prototypes M of shape m x c x 3.

    ortho: sum over distinct pairs {i, j} of cos^2 between flattened
    prototypes (terms with a zero-norm prototype count as 0).  sparsity: mean over
    prototypes of the sum of per-control-point L2 norms.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 3 or M.shape[0] < 1:
        raise ShapeError(f"prototypes must be m x c x 3 with m >= 1, got {M.shape}")
    m = M.shape[0]
    U = M.reshape(m, -1)
    norms = np.sqrt((U * U).sum(axis=1))
    ok = norms > 0
    inv = np.where(ok, 1.0 / np.where(ok, norms, 1.0), 0.0)
    Uh = U * inv[:, None]
    C = Uh @ Uh.T
    np.fill_diagonal(C, 0.0)
    ortho = float((C * C).sum()) / 2.0
    # d(c_ij)/du_i = (uh_j - c_ij uh_i) / |u_i|
    d_ortho = 2.0 * ((C @ Uh) - (C * C).sum(axis=1)[:, None] * Uh) * inv[:, None]

    pn = np.sqrt((M * M).sum(axis=2))
    sparsity = float(pn.sum(axis=1).mean())
    safe = np.where(pn > 0, pn, 1.0)
    d_sparsity = np.where((pn > 0)[..., None], M / safe[..., None], 0.0) / m
    return ortho, sparsity, d_ortho.reshape(M.shape), d_sparsity


def prototype_regularizers(M):
    ortho, sparsity, _, _ = prototype_regularizers_grad(M)
    return ortho, sparsity
