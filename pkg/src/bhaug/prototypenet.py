"""PrototypeNet: learns per-sample deformation prototypes by fitting in-class
source -> target deformations through the blend function W(C0 + sum a_i M_i).

Layout of one training pair:

    source, target --encoder--> g_s, g_t                   (256 each)
    [g_s, C0_j, wsummary_j] --feature head--> F_j          (c x 64)
    F_j --offset head--> m offsets per control            -> M (m x c x 3)
    [g_s, g_t, C0_j, F_j] --fit head--> scores (c x m) --max over c--> a (m)
    deformed = W (C0 + sum_i a_i M_i)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError
from .geometry import BiharmonicCoords, PointCloud, combine_prototypes
from .losses import (chamfer, chamfer_grad, prototype_regularizers_grad, rotate,
                     symmetry_loss_grad)

log = logging.getLogger(__name__)

FEATURE_DIM = 64
GLOBAL_DIM = 256
SUMMARY_DIM = 4


@dataclass
class PrototypeConfig:
    m: int = 15
    epochs: int = 60
    targets: int = 20
    v_align: int = 4
    v_sym: int = 2
    lambda_fit: float = 1.0
    lambda_sym: float = 1.0
    lambda_ortho: float = 0.1
    lambda_sparse: float = 0.1
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0


@dataclass(frozen=True)
class PrototypeSet:
    M: np.ndarray
    F_mh: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        M, F = np.asarray(self.M, dtype=np.float64), np.asarray(self.F_mh, dtype=np.float64)
        if M.ndim != 3 or M.shape[2] != 3:
            raise ShapeError(f"M must be m x c x 3, got {M.shape}")
        if F.shape != (M.shape[1], FEATURE_DIM):
            raise ShapeError(f"F_mh must be {M.shape[1]} x {FEATURE_DIM}, got {F.shape}")
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(F))):
            raise FloatingPointError("prototype set has non-finite entries")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "F_mh", F)


def init_prototypenet(m: int = 15, rng=None) -> dict:
    rng = np.random.default_rng(rng)
    return {
        "encoder": nn.init_mlp([3, 64, 128, GLOBAL_DIM], rng, last="relu"),
        "feature": nn.init_mlp([GLOBAL_DIM + 3 + SUMMARY_DIM, 128, FEATURE_DIM], rng),
        # small output layers: training starts close to the identity deformation
        "offset": nn.init_mlp([FEATURE_DIM, 128, 3 * m], rng, last_scale=0.01),
        "fit": nn.init_mlp([2 * GLOBAL_DIM + 3 + FEATURE_DIM, 128, m], rng, last_scale=0.1),
    }


def w_summary(bc: BiharmonicCoords, points: np.ndarray) -> np.ndarray:
    """Fixed-width stand-in for a W column: weighted centroid (3) and mass (1)."""
    mass = bc.W.sum(axis=0)
    num = bc.W.T @ points
    safe = np.where(np.abs(mass) > 1e-12, mass, 1.0)
    cent = np.where((np.abs(mass) > 1e-12)[:, None], num / safe[:, None], bc.controls.C0)
    return np.concatenate([cent, mass[:, None]], axis=1)


def encode(params: dict, cloud) -> np.ndarray:
    X = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    return nn.pointnet_forward(params["encoder"], X)[0]


def _predict(params, g_src, C0, summary):
    c = C0.shape[0]
    x = np.concatenate([np.broadcast_to(g_src, (c, g_src.size)), C0, summary], axis=1)
    F, fcache = nn.mlp_forward(params["feature"], x)
    off, ocache = nn.mlp_forward(params["offset"], F)
    m = off.shape[1] // 3
    M = off.reshape(c, m, 3).transpose(1, 0, 2)
    return M, F, (fcache, ocache)


def predict_prototypes(params: dict, g_src, controls, summary, sample_id="") -> PrototypeSet:
    C0 = np.asarray(getattr(controls, "C0", controls))
    summary = np.asarray(summary)
    if summary.shape != (C0.shape[0], SUMMARY_DIM):
        raise ShapeError(f"W summary must be {C0.shape[0]} x {SUMMARY_DIM}, got {summary.shape}")
    M, F, _ = _predict(params, np.asarray(g_src), C0, summary)
    return PrototypeSet(M, F, sample_id)


def _fit(params, g_src, g_tgt, C0, F):
    c = C0.shape[0]
    x = np.concatenate([np.broadcast_to(g_src, (c, g_src.size)),
                        np.broadcast_to(g_tgt, (c, g_tgt.size)), C0, F], axis=1)
    scores, cache = nn.mlp_forward(params["fit"], x)
    a, arg = nn.max_pool(scores, axis=0)
    return a, (cache, arg, scores.shape)


def fit_coefficients(params: dict, g_src, g_tgt, controls, F_mh) -> np.ndarray:
    C0 = np.asarray(getattr(controls, "C0", controls))
    if F_mh.shape != (C0.shape[0], FEATURE_DIM):
        raise ShapeError(f"F_mh must be {C0.shape[0]} x {FEATURE_DIM}, got {F_mh.shape}")
    return _fit(params, np.asarray(g_src), np.asarray(g_tgt), C0, F_mh)[0]


def align_target_rotation(source, target, v_align: int = 4) -> PointCloud:
    """Rotate target about the up axis by k*2pi/v_align, keeping the rotation
    closest to source in Chamfer distance (ties to the smallest angle)."""
    src = np.asarray(getattr(source, "points", source))
    tgt_cloud = target if isinstance(target, PointCloud) else PointCloud(target)
    best = None
    for k in range(v_align):
        Q = rotate(tgt_cloud.points, 2 * np.pi * k / v_align)
        d = chamfer(src, Q)
        if best is None or d < best[0]:
            best = (d, Q)
    return tgt_cloud.with_points(best[1])


@dataclass
class PairTerms:
    loss: float
    fit: float
    sym: float
    ortho: float
    sparse: float
    a: np.ndarray
    M: np.ndarray
    deformed: np.ndarray


def pair_loss_grad(params, cfg: PrototypeConfig, bc, summary, g_s, g_t, target, need_grad=True):
    """Loss of one (source, target) pair plus gradients w.r.t. head params and
    both global features."""
    C0 = bc.controls.C0
    M, F, (fcache, ocache) = _predict(params, g_s, C0, summary)
    a, (scache, arg, sshape) = _fit(params, g_s, g_t, C0, F)
    D = bc.W @ (C0 + combine_prototypes(M, a))
    fit, gD, _ = chamfer_grad(D, target)
    sym, gsym = symmetry_loss_grad(D, cfg.v_sym)
    ortho, sparse, d_ortho, d_sparse = prototype_regularizers_grad(M)
    loss = (cfg.lambda_fit * fit + cfg.lambda_sym * sym
            + cfg.lambda_ortho * ortho + cfg.lambda_sparse * sparse)
    terms = PairTerms(loss, fit, sym, ortho, sparse, a, M, D)
    if not need_grad:
        return terms, None, None, None

    dD = cfg.lambda_fit * gD + cfg.lambda_sym * gsym
    dO = bc.W.T @ dD
    da = np.einsum("icd,cd->i", M, dO)
    dM = a[:, None, None] * dO[None] + cfg.lambda_ortho * d_ortho + cfg.lambda_sparse * d_sparse

    grads = nn.zeros_like_model(params)
    dscores = nn.max_pool_backward(da, arg, sshape, axis=0)
    dx_fit, grads["fit"] = nn.mlp_backward(params["fit"], scache, dscores)
    G = GLOBAL_DIM
    dg_s = dx_fit[:, :G].sum(axis=0)
    dg_t = dx_fit[:, G:2 * G].sum(axis=0)
    dF = dx_fit[:, 2 * G + 3:].copy()

    c, m = C0.shape[0], M.shape[0]
    doff = dM.transpose(1, 0, 2).reshape(c, 3 * m)
    dF_o, grads["offset"] = nn.mlp_backward(params["offset"], ocache, doff)
    dF += dF_o
    dx_feat, grads["feature"] = nn.mlp_backward(params["feature"], fcache, dF)
    dg_s += dx_feat[:, :G].sum(axis=0)
    return terms, grads, dg_s, dg_t


def train_step(params, state: nn.AdamState, cfg: PrototypeConfig, pairs):
    """One Adam step over a batch of pairs.

    Each pair is (source_points, bc, summary, target_points); targets are
    assumed already rotation-aligned.  Returns the per-pair PairTerms.
    """
    B = len(pairs)
    src = np.stack([p[0] for p in pairs])
    tgt = np.stack([p[3] for p in pairs])
    X = np.concatenate([src, tgt]) if src.shape[1:] == tgt.shape[1:] else None
    if X is not None:
        gall, ecache = nn.pointnet_forward(params["encoder"], X)
        gs, gt = gall[:B], gall[B:]
    else:
        gs, ecache_s = nn.pointnet_forward(params["encoder"], src)
        gt, ecache_t = nn.pointnet_forward(params["encoder"], tgt)

    grads = nn.zeros_like_model(params)
    dgs = np.zeros_like(gs)
    dgt = np.zeros_like(gt)
    terms = []
    for b, (_, bc, summary, target) in enumerate(pairs):
        t, g, dg_s, dg_t = pair_loss_grad(params, cfg, bc, summary, gs[b], gt[b], target)
        nn.add_into(grads, g, 1.0 / B)
        dgs[b] = dg_s / B
        dgt[b] = dg_t / B
        terms.append(t)

    if X is not None:
        _, grads["encoder"] = nn.pointnet_backward(params["encoder"], ecache, np.concatenate([dgs, dgt]))
    else:
        _, ge_s = nn.pointnet_backward(params["encoder"], ecache_s, dgs)
        _, ge_t = nn.pointnet_backward(params["encoder"], ecache_t, dgt)
        grads["encoder"] = ge_s
        nn.add_into({"e": grads["encoder"]}, {"e": ge_t})
    for t in terms:
        nn.check_finite(np.array([t.loss]), what="loss")
    nn.adam_update(params, grads, state)
    return terms


def _pair_plan(labels, ids, targets, rng):
    """(source, target) index pairs for one epoch: up to ``targets`` in-class
    partners per source, drawn without replacement."""
    by_class = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    plan = []
    for i, y in enumerate(labels):
        others = [j for j in by_class[y] if j != i]
        if not others:
            warnings.warn(f"class {y} has a single sample ({ids[i]}); pairing it with itself")
            plan.extend([(i, i)] * min(targets, 1))
            continue
        pick = rng.choice(len(others), size=min(targets, len(others)), replace=False)
        plan.extend((i, others[k]) for k in pick)
    order = rng.permutation(len(plan))
    return [plan[k] for k in order]


def train_prototypenet(clouds, coords: dict, cfg: PrototypeConfig | None = None, log_every=0):
    """Fit one PrototypeNet on all classes.

    ``clouds`` are normalized PointClouds with labels and ids; ``coords`` maps
    cloud id -> BiharmonicCoords.  Returns (params, {id: PrototypeSet}, history)
    where history holds the mean loss terms of every step.
    """
    cfg = cfg or PrototypeConfig()
    rng = np.random.default_rng(cfg.seed)
    params = init_prototypenet(cfg.m, rng)
    state = nn.AdamState.for_model(params, lr=cfg.lr)
    summaries = {c.id: w_summary(coords[c.id], c.points) for c in clouds}
    labels = [c.label for c in clouds]
    ids = [c.id for c in clouds]
    aligned = {}
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        plan = _pair_plan(labels, ids, cfg.targets, rng)
        for start in range(0, len(plan), cfg.batch):
            pairs = []
            for i, j in plan[start:start + cfg.batch]:
                if (i, j) not in aligned:
                    aligned[(i, j)] = align_target_rotation(clouds[i], clouds[j], cfg.v_align).points
                src = clouds[i]
                pairs.append((src.points, coords[src.id], summaries[src.id], aligned[(i, j)]))
            terms = train_step(params, state, cfg, pairs)
            rec = {k: float(np.mean([getattr(t, k) for t in terms]))
                   for k in ("loss", "fit", "sym", "ortho", "sparse")}
            rec.update(epoch=epoch, step=step)
            history.append(rec)
            if log_every and step % log_every == 0:
                log.info("prototypes epoch %d step %d loss %.4f fit %.4f", epoch, step, rec["loss"], rec["fit"])
            step += 1

    return params, export_prototypes(params, clouds, coords, summaries), history


def export_prototypes(params, clouds, coords, summaries=None) -> dict:
    """Final M and F_mh for every cloud under the trained network."""
    out = {}
    for c in clouds:
        summary = summaries[c.id] if summaries else w_summary(coords[c.id], c.points)
        g = encode(params, c)
        out[c.id] = predict_prototypes(params, g, coords[c.id].controls, summary, c.id)
    return out
