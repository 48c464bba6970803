"""Point clouds, neighbor graphs, graph Laplacians and biharmonic coordinates.

The deformation model is handle based: a small set of control points drives
every point of the cloud through a dense weight matrix ``W`` (n x c), so that

    deformed = W @ (C0 + O)

where ``C0`` are the control rest positions and ``O`` their offsets.  ``W`` is
the minimizer of the bilaplacian energy ``tr(W^T L Minv L W)`` with hard
interpolation constraints at the control points.  The Laplacian is built on a
symmetrized kNN graph rather than a surface mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DegenerateInputError, ShapeError, SingularSystemError

UNIT_TOL = 1e-8


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be n x 3, got {pts.shape}")
        if pts.shape[0] < 1:
            raise ShapeError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"cloud {self.id!r} has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, label=self.label, id=self.id)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    if radius == 0.0:
        raise DegenerateInputError(f"cloud {cloud.id!r}: all points coincide")
    return cloud.with_points(pts / radius)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances, accumulated per axis (x, then y, then z)."""
    d = a[:, None, 0] - b[None, :, 0]
    out = d * d
    for k in range(1, a.shape[1]):
        d = a[:, None, k] - b[None, :, k]
        out += d * d
    return out


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted graph stored as an upper-triangular edge list."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    k: int
    bridges: int = 0

    def adjacency(self) -> sp.csr_matrix:
        r = np.concatenate([self.rows, self.cols])
        c = np.concatenate([self.cols, self.rows])
        w = np.concatenate([self.weights, self.weights])
        return sp.csr_matrix((w, (r, c)), shape=(self.n, self.n))

    def neighbors(self, i: int) -> np.ndarray:
        adj = self.adjacency()
        return adj.indices[adj.indptr[i]:adj.indptr[i + 1]]


def _knn(points: np.ndarray, k: int, chunk: int = 1024):
    """k nearest neighbors of every point (self excluded), ties to lowest index."""
    n = points.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = pairwise_sq_dists(points[start:stop], points)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[start:stop] = order
        dist[start:stop] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx, dist


def _closest_pair(points, a_mask, b_mask):
    a = np.flatnonzero(a_mask)
    b = np.flatnonzero(b_mask)
    best = (np.inf, -1, -1)
    for start in range(0, a.size, 1024):
        block = a[start:start + 1024]
        d2 = pairwise_sq_dists(points[block], points[b])
        flat = int(np.argmin(d2))
        i, j = divmod(flat, b.size)
        if d2[i, j] < best[0]:
            best = (d2[i, j], int(block[i]), int(b[j]))
    return best


def knn_graph(cloud: PointCloud, k: int = 8) -> NeighborGraph:
    """Symmetrized kNN graph with Gaussian weights exp(-d^2 / sigma^2).

    sigma is the mean kNN distance.  Disconnected results are repaired by
    repeatedly adding the shortest edge joining two different components;
    the number of such bridges is recorded on the graph.
    """
    n = cloud.n
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    pts = cloud.points
    idx, dist = _knn(pts, k)
    sigma = float(dist.mean())

    i = np.repeat(np.arange(n), k)
    j = idx.ravel()
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keys, first = np.unique(lo * n + hi, return_index=True)
    rows, cols = keys // n, keys % n
    d = dist.ravel()[first]
    weights = np.exp(-(d * d) / sigma**2) if sigma > 0 else np.ones_like(d)

    rows, cols, weights = list(rows), list(cols), list(weights)
    floor = min(weights)
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    bridges = 0
    while ncomp > 1:
        # shortest edge between any two components; scan component pairs
        best = (np.inf, -1, -1)
        for comp in range(ncomp):
            cand = _closest_pair(pts, labels == comp, labels != comp)
            if cand[0] < best[0]:
                best = cand
        d2, a, b = best
        w = np.exp(-d2 / sigma**2) if sigma > 0 else 1.0
        rows.append(min(a, b))
        cols.append(max(a, b))
        # far bridges would underflow to weight 0 and leave the system singular
        weights.append(max(w, floor))
        bridges += 1
        la, lb = labels[a], labels[b]
        labels[labels == max(la, lb)] = min(la, lb)
        labels[labels > max(la, lb)] -= 1
        ncomp -= 1

    return NeighborGraph(
        n=n,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
        k=k,
        bridges=bridges,
    )


@dataclass(frozen=True)
class LaplacianPair:
    L: sp.csr_matrix
    Minv: sp.dia_matrix

    @property
    def n(self) -> int:
        return self.L.shape[0]


def graph_laplacian(graph: NeighborGraph, mass: str = "unit") -> LaplacianPair:
    """L = D - A, with Minv the identity ("unit") or the inverse degree ("degree")."""
    A = graph.adjacency()
    deg = np.asarray(A.sum(axis=1)).ravel()
    assert np.all(deg > 0), "zero-degree node in a connected graph"
    L = (sp.diags(deg) - A).tocsr()
    if mass == "unit":
        minv = np.ones(graph.n)
    elif mass == "degree":
        minv = 1.0 / deg
    else:
        raise ValueError(f"unknown mass {mass!r}; expected 'unit' or 'degree'")
    return LaplacianPair(L=L, Minv=sp.diags(minv))


@dataclass(frozen=True)
class ControlPoints:
    indices: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        idx = _frozen(self.indices, dtype=np.int64)
        C0 = _frozen(self.C0)
        if idx.ndim != 1 or idx.size < 2:
            raise ValueError("need at least 2 control points")
        if np.unique(idx).size != idx.size:
            raise ValueError("control indices must be distinct")
        if C0.shape != (idx.size, 3):
            raise ShapeError(f"C0 must be {idx.size} x 3, got {C0.shape}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "C0", C0)

    @property
    def c(self) -> int:
        return self.indices.size

    @classmethod
    def from_cloud(cls, cloud: PointCloud, indices) -> "ControlPoints":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= cloud.n):
            raise ValueError("control index out of range")
        return cls(idx, cloud.points[idx])


def farthest_point_sample(
    cloud: PointCloud, c: int, seed=0, start: int | None = None
) -> ControlPoints:
    """Greedy farthest point sampling.

    The first index is a seeded uniform draw unless ``start`` is given; each
    later pick maximizes the distance to the chosen set, ties to lowest index.
    """
    n = cloud.n
    if not 2 <= c <= n:
        raise ValueError(f"need 2 <= c <= n, got c={c}, n={n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    pts = cloud.points
    chosen = [start]
    mind = pairwise_sq_dists(pts, pts[[start]])[:, 0]
    mind[start] = -1.0
    for _ in range(c - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, pairwise_sq_dists(pts, pts[[nxt]])[:, 0])
        mind[chosen] = -1.0
    return ControlPoints.from_cloud(cloud, chosen)


@dataclass(frozen=True)
class BiharmonicCoords:
    W: np.ndarray
    controls: ControlPoints
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        W = _frozen(self.W)
        c = self.controls.c
        if W.ndim != 2 or W.shape[1] != c:
            raise ShapeError(f"W must be n x {c}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise FloatingPointError("biharmonic weights contain non-finite entries")
        if self.check:
            rows = W[self.controls.indices]
            if np.abs(rows - np.eye(c)).max() > UNIT_TOL:
                raise ValueError("W violates interpolation at control points")
            if np.abs(W.sum(axis=1) - 1.0).max() > UNIT_TOL:
                raise ValueError("W rows do not sum to 1")
        object.__setattr__(self, "W", W)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def c(self) -> int:
        return self.controls.c


def bilaplacian(lap: LaplacianPair) -> sp.csc_matrix:
    K = lap.L @ lap.Minv @ lap.L
    # symmetric by construction up to rounding; make it exact
    return ((K + K.T) * 0.5).tocsc()


def compute_biharmonic_coords(lap: LaplacianPair, controls: ControlPoints) -> BiharmonicCoords:
    """Solve K_ff W_f = -K_fc with one factorization shared by all columns."""
    n, c = lap.n, controls.c
    idx = controls.indices
    if idx.max() >= n:
        raise ValueError("control index out of range for this Laplacian")
    W = np.zeros((n, c))
    W[idx, np.arange(c)] = 1.0
    free = np.setdiff1d(np.arange(n), idx)
    if free.size == 0:
        return BiharmonicCoords(W, controls)

    # K_ff is singular exactly when some graph component holds no control point
    ncomp, labels = connected_components(lap.L, directed=False)
    if ncomp > 1:
        has_ctrl = np.zeros(ncomp, dtype=bool)
        has_ctrl[labels[idx]] = True
        for comp in np.flatnonzero(~has_ctrl):
            members = np.flatnonzero(labels == comp)
            raise SingularSystemError(
                f"component {comp} ({members.size} nodes, first node {members[0]}) "
                "contains no control point; free block is singular"
            )

    K = bilaplacian(lap)
    K_ff = K[free][:, free].tocsc()
    K_fc = K[free][:, idx].toarray()
    # no pivoting + symmetric ordering: the SPD path of SuperLU
    lu = splu(K_ff, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    W[free] = lu.solve(-K_fc)
    return BiharmonicCoords(W, controls)


def _check_offsets(bc: BiharmonicCoords, O: np.ndarray) -> np.ndarray:
    O = np.asarray(O, dtype=np.float64)
    if O.shape != (bc.c, 3):
        raise ShapeError(f"offsets must be {bc.c} x 3, got {O.shape}")
    return O


def deform(bc: BiharmonicCoords, offsets) -> np.ndarray:
    """W (C0 + O)."""
    O = _check_offsets(bc, offsets)
    return bc.W @ (bc.controls.C0 + O)


def combine_prototypes(prototypes, a) -> np.ndarray:
    """sum_i a_i M_i for prototypes of shape m x c x 3."""
    M = np.asarray(prototypes, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if M.ndim != 3 or M.shape[2] != 3:
        raise ShapeError(f"prototypes must be m x c x 3, got {M.shape}")
    if a.shape != (M.shape[0],):
        raise ShapeError(f"{M.shape[0]} prototypes but {a.shape} coefficients")
    return np.tensordot(a, M, axes=1)


def blend_deform(bc: BiharmonicCoords, prototypes, a) -> np.ndarray:
    """W (C0 + sum_i a_i M_i)."""
    return deform(bc, combine_prototypes(prototypes, a))


def reconstruct(bc: BiharmonicCoords) -> np.ndarray:
    return bc.W @ bc.controls.C0


def biharmonic_for_cloud(
    cloud: PointCloud, c: int = 32, k: int = 8, mass: str = "unit", seed=0
) -> BiharmonicCoords:
    """Graph, Laplacian, FPS controls and W for one (normalized) cloud."""
    graph = knn_graph(cloud, k)
    lap = graph_laplacian(graph, mass)
    controls = farthest_point_sample(cloud, c, seed)
    return compute_biharmonic_coords(lap, controls)
