"""CoefNet and the biharmonic augmentation of one sample.

CoefNet sees, for every (prototype i, control point j) pair, the 71-wide row

    [a_rand_i | C0_j (3) | F_mh_j (64) | M_ij (3)]

runs three shared dense layers down to one score and max-pools over the
control points, giving one coefficient offset per prototype.  The final
coefficients are a = a_rand + beta * a_off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ArtifactNotFoundError, ShapeError
from .geometry import BiharmonicCoords, ControlPoints, PointCloud, blend_deform, deform, reconstruct
from .prototypenet import FEATURE_DIM

FEATURE_WIDTH = 1 + 3 + FEATURE_DIM + 3
BLOCKS = (("a_rand", 1), ("C0", 3), ("F_mh", FEATURE_DIM), ("M", 3))


@dataclass
class CoefNetConfig:
    beta: float = 0.1
    mu_a: float = 0.0
    sigma_a: float = 0.5
    m: int = 15
    direct: bool = False  # network output replaces a instead of offsetting it

    def __post_init__(self):
        if not self.sigma_a >= 0:
            raise ValueError("sigma_a must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class Coefficients:
    a_rand: np.ndarray
    a_off: np.ndarray
    a: np.ndarray
    beta: float


@dataclass
class SampleArtifacts:
    """Everything the augmentor needs for one training sample."""

    id: str
    W: np.ndarray
    C0: np.ndarray
    indices: np.ndarray
    M: np.ndarray | None = None
    F_mh: np.ndarray | None = None
    label: int | None = None
    _bc: BiharmonicCoords | None = field(default=None, repr=False, compare=False)

    @property
    def bc(self) -> BiharmonicCoords:
        if self._bc is None:
            self._bc = BiharmonicCoords(self.W, ControlPoints(self.indices, self.C0), check=False)
        return self._bc

    def require_prototypes(self):
        if self.M is None or self.F_mh is None:
            raise ArtifactNotFoundError(f"sample {self.id!r} has no deformation prototypes")

    @classmethod
    def from_arrays(cls, sample_id, arrays: dict, label=None) -> "SampleArtifacts":
        for name in ("W", "C0", "indices"):
            if name not in arrays:
                raise ArtifactNotFoundError(f"sample {sample_id!r} is missing {name}")
        return cls(sample_id, arrays["W"], arrays["C0"], np.asarray(arrays["indices"], dtype=np.int64),
                   arrays.get("M"), arrays.get("F_mh"), label)

    @classmethod
    def from_parts(cls, sample_id, bc: BiharmonicCoords, protos=None, label=None) -> "SampleArtifacts":
        M = None if protos is None else protos.M
        F = None if protos is None else protos.F_mh
        return cls(sample_id, bc.W, bc.controls.C0, bc.controls.indices, M, F, label, bc)

    def arrays(self) -> dict:
        out = {"W": self.W, "C0": self.C0, "indices": self.indices.astype(np.float64)}
        if self.M is not None:
            out["M"] = self.M
            out["F_mh"] = self.F_mh
        return out


def init_coefnet(rng=None, last_scale=0.1) -> dict:
    rng = np.random.default_rng(rng)
    return {"coef": nn.init_mlp([FEATURE_WIDTH, 64, 32, 1], rng, last_scale=last_scale)}


def sample_random_coefficients(config: CoefNetConfig, rng, m=None) -> np.ndarray:
    return rng.normal(config.mu_a, config.sigma_a, size=m or config.m)


def build_features(a_rand, F_mh, C0, M) -> np.ndarray:
    """Batched (B, m, c, 71) feature tensor.  Inputs carry a leading batch axis."""
    B, m, c = M.shape[0], M.shape[1], M.shape[2]
    parts = {
        "a_rand": np.broadcast_to(a_rand[:, :, None, None], (B, m, c, 1)),
        "C0": np.broadcast_to(C0[:, None], (B, m, c, C0.shape[-1])),
        "F_mh": np.broadcast_to(F_mh[:, None], (B, m, c, F_mh.shape[-1])),
        "M": M,
    }
    for name, width in BLOCKS:
        if parts[name].shape != (B, m, c, width):
            raise ShapeError(f"{name} block has shape {parts[name].shape[1:]}, width {parts[name].shape[-1]}; "
                             f"expected width {width} (total feature width {FEATURE_WIDTH})")
    X = np.concatenate([parts[name] for name, _ in BLOCKS], axis=-1)
    assert X.shape[-1] == FEATURE_WIDTH
    return X


def coefnet_forward_batch(params, a_rand, F_mh, C0, M):
    """a_off for a batch: a_rand (B,m), F_mh (B,c,64), C0 (B,c,3), M (B,m,c,3)."""
    a_rand, F_mh, C0, M = (np.asarray(x, dtype=np.float64) for x in (a_rand, F_mh, C0, M))
    if M.ndim != 4 or a_rand.shape != M.shape[:2]:
        raise ShapeError(f"a_rand {a_rand.shape} does not match prototypes {M.shape}")
    X = build_features(a_rand, F_mh, C0, M)
    scores, mcache = nn.mlp_forward(params["coef"], X)
    a_off, arg = nn.max_pool(scores[..., 0], axis=2)
    return a_off, (mcache, arg, scores.shape[:-1])


def coefnet_backward_batch(params, cache, d_aoff) -> dict:
    mcache, arg, shape = cache
    dscores = nn.max_pool_backward(d_aoff, arg, shape, axis=2)
    _, g = nn.mlp_backward(params["coef"], mcache, dscores[..., None], need_input=False)
    return {"coef": g}


def coefnet_forward(params, a_rand, F_mh, C0, M) -> np.ndarray:
    a_off, _ = coefnet_forward_batch(params, np.asarray(a_rand)[None], np.asarray(F_mh)[None],
                                     np.asarray(C0)[None], np.asarray(M)[None])
    return a_off[0]


def combine(a_rand, a_off, config: CoefNetConfig) -> np.ndarray:
    if config.direct:
        return np.array(a_off, dtype=np.float64)
    return a_rand + config.beta * a_off


def guided_coefficients(params, config: CoefNetConfig, art: SampleArtifacts, rng) -> Coefficients:
    art.require_prototypes()
    a_rand = sample_random_coefficients(config, rng, art.M.shape[0])
    a_off = coefnet_forward(params, a_rand, art.F_mh, art.C0, art.M)
    return Coefficients(a_rand, a_off, combine(a_rand, a_off, config), config.beta)


def biharmonic_augment(params, config: CoefNetConfig, art: SampleArtifacts, rng) -> PointCloud:
    coefs = guided_coefficients(params, config, art, rng)
    return PointCloud(blend_deform(art.bc, art.M, coefs.a), label=art.label, id=art.id)


def recovered(art: SampleArtifacts) -> PointCloud:
    return PointCloud(reconstruct(art.bc), label=art.label, id=art.id)


def random_offset_augment(art: SampleArtifacts, sigma: float, rng) -> PointCloud:
    O = rng.normal(0.0, sigma, size=(art.C0.shape[0], 3))
    return PointCloud(deform(art.bc, O), label=art.label, id=art.id)


def random_coefficient_augment(art: SampleArtifacts, sigma_a: float, rng, mu_a=0.0) -> PointCloud:
    art.require_prototypes()
    a = rng.normal(mu_a, sigma_a, size=art.M.shape[0])
    return PointCloud(blend_deform(art.bc, art.M, a), label=art.label, id=art.id)
