"""Independent reference computations used by the tests.

Nothing here calls into the code path it checks: dense linear algebra for
biharmonic weights, explicit double loops for Chamfer distances, arbitrary
precision for softmax cross-entropy.
"""

import math

import mpmath
import numpy as np


def dense_biharmonic(L_dense, minv_diag, indices):
    """Solve the KKT system of  min tr(W^T K W)  s.t.  W[indices] = I  densely.

        [2K  S^T] [W]   [0]
        [S    0 ] [Λ] = [I]
    """
    n = L_dense.shape[0]
    c = len(indices)
    K = L_dense @ np.diag(minv_diag) @ L_dense
    S = np.zeros((c, n))
    S[np.arange(c), indices] = 1.0
    kkt = np.zeros((n + c, n + c))
    kkt[:n, :n] = 2 * K
    kkt[:n, n:] = S.T
    kkt[n:, :n] = S
    rhs = np.zeros((n + c, c))
    rhs[n:] = np.eye(c)
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n]


def brute_chamfer(A, B):
    total = []
    for p in A:
        total.append(min(_sq(p, q) for q in B))
    for q in B:
        total.append(min(_sq(p, q) for p in A))
    return math.fsum(total)


def _sq(p, q):
    dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
    return dx * dx + dy * dy + dz * dz


def precise_cross_entropy(logits, y):
    with mpmath.workdps(50):
        zs = [mpmath.mpf(float(z)) for z in logits]
        return float(mpmath.log(mpmath.fsum(mpmath.exp(z) for z in zs)) - zs[y])


def union_find_components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(n)})


def exhaustive_fps(points, c, start):
    """FPS by explicit loops over all candidates."""
    chosen = [start]
    while len(chosen) < c:
        best, best_d = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(math.dist(points[i], points[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def adam_reference(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def dense_mlp(weights, biases, acts, x):
    h = np.array(x, dtype=np.float64)
    for W, b, act in zip(weights, biases, acts):
        out = np.zeros((h.shape[0], W.shape[1]))
        for r in range(h.shape[0]):
            for j in range(W.shape[1]):
                out[r, j] = math.fsum(h[r, i] * W[i, j] for i in range(W.shape[0])) + b[j]
        h = np.maximum(out, 0.0) if act == "relu" else out
    return h
